"""Volume cleanup before meshing.

Three passes, each pure (they return a new volume):

* noisy-voxel relabeling: isolated background voxels (type 1) and voxels whose
  entire 26-neighborhood carries other labels (type 2) take a neighbor label;
* disconnected-region relabeling: 6-connected components of each material are
  split into distinct labels, tiny ones culled to background;
* non-manifold elimination: same-label voxel pairs touching only at a grid
  vertex or edge are joined by randomized relabeling templates until none
  remain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy import ndimage

from .volume import LabeledVolume, VolumeError


class NonManifoldResidualError(RuntimeError):
    """Template passes hit the iteration cap with pairs still present."""

    def __init__(self, residual):
        super().__init__(
            f"non-manifold elimination did not converge; {len(residual)} pairs remain")
        self.residual = residual


@dataclass
class PreprocessReport:
    noisy_relabeled: dict = field(default_factory=lambda: {"type1": 0, "type2": 0})
    regions_split: dict = field(default_factory=dict)   # material -> [new labels]
    regions_culled: list = field(default_factory=list)  # [(material, voxel count)]
    nonmanifold_fixed: dict = field(default_factory=lambda: {"vertex": 0, "edge": 0})
    iterations: int = 0
    seed: int | None = None

    def merge(self, other: "PreprocessReport") -> "PreprocessReport":
        out = PreprocessReport(
            noisy_relabeled={k: self.noisy_relabeled[k] + other.noisy_relabeled[k]
                             for k in self.noisy_relabeled},
            regions_split={**self.regions_split, **other.regions_split},
            regions_culled=self.regions_culled + other.regions_culled,
            nonmanifold_fixed={k: self.nonmanifold_fixed[k] + other.nonmanifold_fixed[k]
                               for k in self.nonmanifold_fixed},
            iterations=self.iterations + other.iterations,
            seed=self.seed if self.seed is not None else other.seed,
        )
        return out

    def to_dict(self) -> dict:
        return {
            "noisy_relabeled": dict(self.noisy_relabeled),
            "regions_split": {str(k): list(v) for k, v in self.regions_split.items()},
            "regions_culled": [[int(m), int(n)] for m, n in self.regions_culled],
            "nonmanifold_fixed": dict(self.nonmanifold_fixed),
            "iterations": int(self.iterations),
            "seed": self.seed,
        }


_OFFSETS_26 = np.array([(di, dj, dk)
                        for di in (-1, 0, 1) for dj in (-1, 0, 1) for dk in (-1, 0, 1)
                        if (di, dj, dk) != (0, 0, 0)], dtype=np.int64)


def _padded(labels):
    # out-of-grid voxels are background
    return np.pad(labels, 1, mode="constant", constant_values=0)


def _noisy_masks(labels):
    """Masks of type-1 (background island) and type-2 (foreign island) voxels."""
    pad = _padded(labels)
    all_nonzero = np.ones(labels.shape, dtype=bool)
    all_differ = np.ones(labels.shape, dtype=bool)
    for off in _OFFSETS_26:
        sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(off, labels.shape))
        neigh = pad[sl]
        all_nonzero &= neigh != 0
        all_differ &= neigh != labels
    type1 = (labels == 0) & all_nonzero
    type2 = (labels != 0) & all_differ
    return type1, type2


def _majority_neighbor_label(labels, pad, idx):
    """Most frequent 26-neighborhood label, smallest label id on ties."""
    i, j, k = idx
    block = pad[i:i + 3, j:j + 3, k:k + 3].ravel()
    votes = np.delete(block, 13)  # drop the center voxel
    vals, counts = np.unique(votes, return_counts=True)
    return vals[counts == counts.max()].min()


def relabel_noisy_voxels(vol: LabeledVolume, mode: str = "both"):
    """Relabel isolated voxels to the majority label of their 26-neighborhood.

    Iterates full passes until a pass changes nothing; relabels are computed
    from a snapshot per pass, so the result is order independent.
    """
    if mode not in ("type1", "type2", "both"):
        raise ValueError(f"bad mode {mode!r}")
    labels = vol.labels.copy()
    report = PreprocessReport()
    while True:
        type1, type2 = _noisy_masks(labels)
        if mode == "type1":
            type2 = np.zeros_like(type2)
        elif mode == "type2":
            type1 = np.zeros_like(type1)
        targets = np.argwhere(type1 | type2)
        if len(targets) == 0:
            break
        pad = _padded(labels)
        new_vals = [ _majority_neighbor_label(labels, pad, t) for t in targets ]
        for t, v in zip(targets, new_vals):
            labels[tuple(t)] = v
        report.noisy_relabeled["type1"] += int(type1.sum())
        report.noisy_relabeled["type2"] += int(type2.sum())
        report.iterations += 1
    return vol.with_labels(labels), report


_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


def relabel_disconnected_regions(vol: LabeledVolume, s_tol: float = 1e-4,
                                 raw_inequality: bool = False):
    """Split face-connected components of each material into distinct labels.

    A component whose voxel-count fraction of its material falls below
    ``s_tol`` is relabeled to background.  The largest component keeps the
    original label; the rest get fresh labels.

    ``raw_inequality`` switches to culling component j when
    ``(|S_i| - |S_ij|) / |S_i| < s_tol`` instead of ``|S_ij| / |S_i| < s_tol``
    (an alternative literal reading of the smallness test; not the default).
    """
    if not (0.0 < s_tol < 1.0):
        raise ValueError("s_tol must be in (0, 1)")
    labels = vol.labels.copy()
    report = PreprocessReport()
    mats = [int(m) for m in vol.materials()]
    next_label = int(labels.max()) + 1 if mats else 1
    for m in mats:
        comp, ncomp = ndimage.label(labels == m, structure=_FACE_STRUCTURE)
        if ncomp <= 1:
            continue
        sizes = np.bincount(comp.ravel())[1:]  # component ids 1..ncomp
        total = sizes.sum()
        if raw_inequality:
            cull = (total - sizes) / total < s_tol
        else:
            cull = sizes / total < s_tol
        keep_ids = [c for c in range(1, ncomp + 1) if not cull[c - 1]]
        if keep_ids:
            keeper = keep_ids[int(np.argmax(sizes[np.array(keep_ids) - 1]))]
        else:
            keeper = None
        new_for_m = []
        for c in range(1, ncomp + 1):
            mask = comp == c
            if cull[c - 1]:
                labels[mask] = 0
                report.regions_culled.append((m, int(sizes[c - 1])))
            elif c != keeper:
                if next_label > np.iinfo(labels.dtype).max:
                    labels = labels.astype(np.uint32 if next_label > 65535 else np.uint16)
                labels[mask] = next_label
                new_for_m.append(next_label)
                next_label += 1
        if new_for_m:
            report.regions_split[m] = new_for_m
    return vol.with_labels(labels), report


# ---------------------------------------------------------------------------
# Non-manifold voxel connectivity

# the four main diagonals of a 2x2x2 voxel cluster
_CUBE_DIAGONALS = (
    ((0, 0, 0), (1, 1, 1)),
    ((1, 0, 0), (0, 1, 1)),
    ((0, 1, 0), (1, 0, 1)),
    ((0, 0, 1), (1, 1, 0)),
)

# in-plane 2x2 clusters: (axis pair kept, fixed axis)
_PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def _cluster_connected(labels, base, a, b, lab):
    """Face-connected same-label path between corners a and b of the 2x2x2
    cluster at ``base``, using only the cluster's 8 voxels."""
    cells = [(di, dj, dk) for di in (0, 1) for dj in (0, 1) for dk in (0, 1)]
    inset = {c for c in cells
             if labels[base[0] + c[0], base[1] + c[1], base[2] + c[2]] == lab}
    if a not in inset or b not in inset:
        return True  # pair no longer exists; treat as resolved
    frontier = [a]
    seen = {a}
    while frontier:
        cur = frontier.pop()
        if cur == b:
            return True
        for axis in range(3):
            nxt = list(cur)
            nxt[axis] ^= 1
            nxt = tuple(nxt)
            if nxt in inset and nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return False


def find_nonmanifold_voxel_pairs(vol: LabeledVolume):
    """All same-label voxel pairs joined only through a grid vertex or edge.

    Returns a list of ``((ijk_a, ijk_b), kind)`` with kind in
    {"vertex", "edge"}, ordered by cluster position (k, j, i ascending).
    """
    labels = vol.labels
    nx, ny, nz = labels.shape
    pairs = []

    if nx > 1 and ny > 1 and nz > 1:
        sub = {}
        for di in (0, 1):
            for dj in (0, 1):
                for dk in (0, 1):
                    sub[(di, dj, dk)] = labels[di:nx - 1 + di, dj:ny - 1 + dj, dk:nz - 1 + dk]
        for a, b in _CUBE_DIAGONALS:
            la, lb = sub[a], sub[b]
            cand = (la != 0) & (la == lb)
            for base in np.argwhere(cand):
                base = tuple(int(x) for x in base)
                lab = int(labels[base[0] + a[0], base[1] + a[1], base[2] + a[2]])
                if not _cluster_connected(labels, base, a, b, lab):
                    va = (base[0] + a[0], base[1] + a[1], base[2] + a[2])
                    vb = (base[0] + b[0], base[1] + b[1], base[2] + b[2])
                    pairs.append((base, (va, vb), "vertex"))

    for ax0, ax1 in _PLANE_AXES:
        shape = list(labels.shape)
        if shape[ax0] < 2 or shape[ax1] < 2:
            continue

        def cell(d0, d1):
            sl = [slice(None)] * 3
            sl[ax0] = slice(d0, labels.shape[ax0] - 1 + d0)
            sl[ax1] = slice(d1, labels.shape[ax1] - 1 + d1)
            return labels[tuple(sl)]

        c00, c11 = cell(0, 0), cell(1, 1)
        c10, c01 = cell(1, 0), cell(0, 1)
        for (pa, pb), (qa, qb) in ((((0, 0), (1, 1)), ((1, 0), (0, 1))),
                                   (((1, 0), (0, 1)), ((0, 0), (1, 1)))):
            la = cell(*pa)
            lb = cell(*pb)
            oa = cell(*qa)
            ob = cell(*qb)
            cand = (la != 0) & (la == lb) & (oa != la) & (ob != la)
            for base in np.argwhere(cand):
                base = tuple(int(x) for x in base)
                va = list(base)
                vb = list(base)
                va[ax0] += pa[0]
                va[ax1] += pa[1]
                vb[ax0] += pb[0]
                vb[ax1] += pb[1]
                pairs.append((base, (tuple(va), tuple(vb)), "edge"))

    # lexicographic (k, j, i) cluster order keeps template passes reproducible
    pairs.sort(key=lambda p: (p[0][2], p[0][1], p[0][0], p[2], p[1]))
    return [(pair, kind) for _, pair, kind in pairs]


def _vertex_templates(va, vb):
    """Six monotone face-step paths from va to its cube-diagonal vb; each
    template relabels the path's two intermediate voxels."""
    step = [vb[i] - va[i] for i in range(3)]
    out = []
    for order in permutations(range(3)):
        cur = list(va)
        mids = []
        for axis in order[:2]:
            cur[axis] += step[axis]
            mids.append(tuple(cur))
        out.append(mids)
    return out


def _edge_templates(va, vb):
    """Two single-voxel relabelings joining an in-plane diagonal pair."""
    axes = [i for i in range(3) if va[i] != vb[i]]
    out = []
    for first in axes:
        cur = list(va)
        cur[first] = vb[first]
        out.append([tuple(cur)])
    return out


def eliminate_nonmanifold_voxels(vol: LabeledVolume, seed: int = 0,
                                 max_passes: int = 1000):
    """Relabel voxels with randomized templates until no vertex- or
    edge-connected same-label pairs remain.

    Each pass fixes all detected vertex pairs, then all edge pairs, then
    re-detects.  Template choice is uniform per pair from the seeded RNG, so
    runs are reproducible.  Raises NonManifoldResidualError past the pass cap.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = vol.labels.copy()
    report = PreprocessReport(seed=seed)
    work = vol.with_labels(labels)
    for _ in range(max_passes):
        all_pairs = find_nonmanifold_voxel_pairs(work)
        if not all_pairs:
            return work, report
        report.iterations += 1
        for (va, vb), kind in all_pairs:
            if kind != "vertex":
                continue
            lab = int(labels[va])
            base = tuple(min(va[i], vb[i]) for i in range(3))
            ca = tuple(va[i] - base[i] for i in range(3))
            cb = tuple(vb[i] - base[i] for i in range(3))
            if labels[vb] != lab or _cluster_connected(labels, base, ca, cb, lab):
                continue  # resolved by an earlier fix this pass
            mids = _vertex_templates(va, vb)[rng.integers(6)]
            for m in mids:
                labels[m] = lab
            report.nonmanifold_fixed["vertex"] += 1
        for (va, vb), kind in all_pairs:
            if kind != "edge":
                continue
            lab = int(labels[va])
            if labels[vb] != lab:
                continue
            templates = _edge_templates(va, vb)
            if any(labels[t[0]] == lab for t in templates):
                continue  # a face path appeared meanwhile
            for m in templates[rng.integers(2)]:
                labels[m] = lab
            report.nonmanifold_fixed["edge"] += 1
    residual = find_nonmanifold_voxel_pairs(work)
    raise NonManifoldResidualError(residual)
