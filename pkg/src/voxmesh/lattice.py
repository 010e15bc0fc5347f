"""Adaptive body-centered cubic tetrahedral lattices.

The lattice interlaces two cubic vertex grids (cell corners and cell centers)
so every interior vertex carries 14 edges and 24 tetrahedra; before
refinement every tet has the dihedral multiset {60 deg x4, 90 deg x2}.

Refinement is red/green: red tets split 1:8 through their edge midpoints
(shortest octahedron diagonal), green tets are 1:2 or 1:4 closure templates
that remove hanging midpoints and are themselves never subdivided - a green
whose region needs more resolution is discarded and its red parent is
re-split.  All vertex coordinates are kept on an exact integer sublattice
(``unit`` mm per step), so midpoint identity, conformity and orientation are
integer-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .meshes import GREEN, RED, TET_EDGES, TET_FACES, TetMesh, tet_volumes
from .volume import DistanceField, LabeledVolume


class LatticeError(RuntimeError):
    pass


@dataclass
class RefinementConfig:
    lattice_sp: float                      # BCC vertex spacing, mm
    fidelity: float | dict = 0.95          # global F or per-material {label: F}
    topo_checks: bool = False
    max_levels: int = 10

    def __post_init__(self):
        if self.lattice_sp <= 0:
            raise ValueError("lattice_sp must be > 0")
        vals = (self.fidelity.values() if isinstance(self.fidelity, dict)
                else [self.fidelity])
        for f in vals:
            if not (0.0 < f <= 1.0):
                raise ValueError("fidelity must be in (0, 1]")

    def fidelity_for(self, material: int) -> float:
        if isinstance(self.fidelity, dict):
            if material not in self.fidelity:
                raise KeyError(f"no fidelity configured for material {material}")
            return float(self.fidelity[material])
        return float(self.fidelity)


# local midpoint slot m_e sits on edge TET_EDGES[e]; slots 4..9 in the
# template tables below refer to m0..m5, slots 0..3 to the corners
_M = [4, 5, 6, 7, 8, 9]

_RED_CORNER_CHILDREN = ((0, 4, 5, 6), (4, 1, 7, 8), (5, 7, 2, 9), (6, 8, 9, 3))
# octahedron children for each choice of internal diagonal
_RED_OCTA_CHILDREN = {
    0: ((4, 9, 5, 6), (4, 9, 6, 8), (4, 9, 8, 7), (4, 9, 7, 5)),  # m0-m5
    1: ((5, 8, 4, 6), (5, 8, 6, 9), (5, 8, 9, 7), (5, 8, 7, 4)),  # m1-m4
    2: ((6, 7, 4, 5), (6, 7, 5, 9), (6, 7, 9, 8), (6, 7, 8, 4)),  # m2-m3
}
_DIAG_PAIRS = ((4, 9), (5, 8), (6, 7))  # (m0,m5), (m1,m4), (m2,m3)

# green closure templates keyed by the 6-bit mask of refined edges
_GREEN_TEMPLATES = {
    # one midpoint: bisect
    1: ((0, 4, 2, 3), (4, 1, 2, 3)),
    2: ((0, 5, 1, 3), (5, 2, 1, 3)),
    4: ((0, 6, 1, 2), (6, 3, 1, 2)),
    8: ((1, 7, 0, 3), (7, 2, 0, 3)),
    16: ((1, 8, 0, 2), (8, 3, 0, 2)),
    32: ((2, 9, 0, 1), (9, 3, 0, 1)),
    # two opposite midpoints: 1:4
    33: ((0, 4, 2, 9), (0, 4, 9, 3), (4, 1, 2, 9), (4, 1, 9, 3)),
    18: ((0, 5, 1, 8), (0, 5, 8, 3), (5, 2, 1, 8), (5, 2, 8, 3)),
    12: ((0, 6, 1, 7), (0, 6, 7, 2), (6, 3, 1, 7), (6, 3, 7, 2)),
    # three midpoints on one face: 1:4 toward the apex
    11: ((0, 4, 5, 3), (4, 1, 7, 3), (5, 7, 2, 3), (4, 7, 5, 3)),
    21: ((0, 4, 6, 2), (4, 1, 8, 2), (6, 8, 3, 2), (4, 8, 6, 2)),
    38: ((0, 5, 6, 1), (5, 2, 9, 1), (6, 9, 3, 1), (5, 9, 6, 1)),
    56: ((1, 7, 8, 0), (7, 2, 9, 0), (8, 9, 3, 0), (7, 9, 8, 0)),
}

# Two midpoints on edges sharing a vertex close with a 1:3 template.  Without
# it, every coherent refinement front upgrades its neighbors ring after ring
# and the cascade sweeps the whole domain.  The doubly-split face is cut by a
# diagonal chosen from global vertex ids so both incident tets agree.
# Entries: (edge1, edge2, shared, far1, far2, apex) in local indices, where
# far1 is the endpoint of edge1 away from the shared vertex.
_ADJ_PAIRS = {}
for _e1 in range(6):
    for _e2 in range(_e1 + 1, 6):
        _s = set(TET_EDGES[_e1]) & set(TET_EDGES[_e2])
        if len(_s) != 1:
            continue
        _b = _s.pop()
        _a = (set(TET_EDGES[_e1]) - {_b}).pop()
        _c = (set(TET_EDGES[_e2]) - {_b}).pop()
        _d = ({0, 1, 2, 3} - {_a, _b, _c}).pop()
        _ADJ_PAIRS[(1 << _e1) | (1 << _e2)] = (_e1, _e2, _b, _a, _c, _d)

_ALLOWED_MASKS = frozenset(_GREEN_TEMPLATES) | frozenset(_ADJ_PAIRS) | {0}

_KEY_SHIFT = 21
_KEY_LIMIT = 1 << _KEY_SHIFT


def _pack(coords) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    return c[..., 0] | (c[..., 1] << _KEY_SHIFT) | (c[..., 2] << (2 * _KEY_SHIFT))


def _int_volumes6(coords4) -> np.ndarray:
    """6x signed tet volume from integer coordinates; exact."""
    a = coords4[:, 1] - coords4[:, 0]
    b = coords4[:, 2] - coords4[:, 0]
    c = coords4[:, 3] - coords4[:, 0]
    return (a[:, 0] * (b[:, 1] * c[:, 2] - b[:, 2] * c[:, 1])
            - a[:, 1] * (b[:, 0] * c[:, 2] - b[:, 2] * c[:, 0])
            + a[:, 2] * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0]))


def red_children_vertices(tet_vertices) -> np.ndarray:
    """Pure-geometry 1:8 split of one tet; returns (8, 4, 3) child corners.

    The octahedron is split along its shortest diagonal; on exact ties the
    first of (m01-m23, m02-m13, m03-m12) wins.
    """
    p = np.asarray(tet_vertices, dtype=np.float64)
    mids = 0.5 * (p[TET_EDGES[:, 0]] + p[TET_EDGES[:, 1]])
    slots = np.concatenate([p, mids], axis=0)
    d = [np.sum((slots[a] - slots[b]) ** 2) for a, b in _DIAG_PAIRS]
    diag = int(np.argmin(d))
    children = _RED_CORNER_CHILDREN + _RED_OCTA_CHILDREN[diag]
    return slots[np.array(children)]


class AdaptiveLattice:
    """Red/green refinement engine on the exact integer sublattice.

    When distance fields are supplied, tets are labeled by the material whose
    field is most positive at the tet centroid (background when none is
    positive); without fields, by the label of the voxel containing the
    centroid.  The field form keeps the sub-mesh hugging the zero level from
    inside, which is what makes the overlap ratios converge without chasing
    sub-voxel refinement.
    """

    def __init__(self, vol: LabeledVolume, lattice_sp: float, max_levels: int = 10,
                 fields: dict[int, DistanceField] | None = None):
        self.vol = vol
        self.fields = fields
        self.sp = float(lattice_sp)
        self.max_levels = int(max_levels)
        self._kscale = self.max_levels + 3
        self.cell = 1 << self._kscale          # one lattice cell, integer units
        self.unit = self.sp / self.cell        # mm per integer unit
        self._key2id: dict[int, int] = {}
        self.vcoords = np.zeros((0, 3), dtype=np.int64)
        self.tets = np.zeros((0, 4), dtype=np.int64)
        self.levels = np.zeros(0, dtype=np.int16)
        self.alive = np.zeros(0, dtype=bool)
        self.parent = np.zeros(0, dtype=np.int64)
        self._greens = np.zeros((0, 4), dtype=np.int64)
        self._green_parent = np.zeros(0, dtype=np.int64)
        self._clean_reds = np.zeros(0, dtype=np.int64)
        self._build()

    # -- construction -------------------------------------------------------

    def _build(self):
        vol, sp = self.vol, self.sp
        lo, hi = vol.physical_bounds()
        base = lo - sp  # one-cell margin
        ncell = np.ceil((hi - base) / sp).astype(int) + 1
        if np.any((ncell + 1) * self.cell >= _KEY_LIMIT):
            raise LatticeError("lattice too fine for the integer coordinate range")
        self.origin = base
        S = self.cell
        nx, ny, nz = ncell

        ci, cj, ck = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        centers = (np.stack([ci, cj, ck], axis=-1).reshape(-1, 3) * S + S // 2)

        tets = []
        for axis in range(3):
            n_face = [nx, ny, nz]
            n_face[axis] -= 1
            fi, fj, fk = np.meshgrid(*[np.arange(n) for n in n_face], indexing="ij")
            cells = np.stack([fi, fj, fk], axis=-1).reshape(-1, 3)
            c1 = cells * S + S // 2
            c2 = c1.copy()
            c2[:, axis] += S
            corner = cells * S
            corner[:, axis] += S  # shared face plane
            ax1, ax2 = [a for a in range(3) if a != axis]
            quad = np.repeat(corner[:, None, :], 4, axis=1)
            quad[:, 1, ax1] += S
            quad[:, 2, ax1] += S
            quad[:, 2, ax2] += S
            quad[:, 3, ax2] += S
            for e in range(4):
                a = quad[:, e]
                b = quad[:, (e + 1) % 4]
                tets.append(np.stack([c1, c2, a, b], axis=1))
        cand = np.concatenate(tets, axis=0)  # (t, 4, 3) integer coords
        keep = self._keep_mask(cand)
        if not keep.any():
            raise LatticeError("no intersecting tetrahedra: lattice spacing too "
                               "large or volume empty")
        cand = cand[keep]
        ids = self._ensure_vertices(cand.reshape(-1, 3)).reshape(-1, 4)
        self._orient(ids)
        self.tets = ids
        self.levels = np.zeros(len(ids), dtype=np.int16)
        self.alive = np.ones(len(ids), dtype=bool)
        self.parent = np.full(len(ids), -1, dtype=np.int64)
        self._refresh_leaves()

    def _keep_mask(self, cand) -> np.ndarray:
        """Drop candidate tets lying wholly outside every material."""
        vol = self.vol
        t = len(cand)
        phys = self.origin + cand.astype(np.float64) * self.unit
        samples = np.concatenate([phys.reshape(-1, 3),
                                  phys.mean(axis=1)], axis=0)
        lab = vol.label_at(samples)
        vlab = lab[:4 * t].reshape(t, 4)
        clab = lab[4 * t:]
        keep = (vlab != 0).any(axis=1) | (clab != 0)
        # a thin feature can thread a tet without touching its corners or
        # centroid; check the undecided tets against material voxel centers
        undecided = np.nonzero(~keep)[0]
        if len(undecided):
            mat = vol.labels != 0
            if mat.any():
                mat_lo = np.array([a.min() for a in np.nonzero(mat)])
                mat_hi = np.array([a.max() for a in np.nonzero(mat)])
                idx_verts = vol.physical_to_index(phys[undecided].reshape(-1, 3))
                idx_verts = idx_verts.reshape(-1, 4, 3)
                for row, vi in zip(undecided, idx_verts):
                    if (vi.max(axis=0) < mat_lo - 0.5).any() or \
                       (vi.min(axis=0) > mat_hi + 0.5).any():
                        continue
                    vox = _voxels_in_tet(vi, vol.dims)
                    if len(vox) and mat[vox[:, 0], vox[:, 1], vox[:, 2]].any():
                        keep[row] = True
        return keep

    # -- vertex bookkeeping --------------------------------------------------

    def _ensure_vertices(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64)
        keys = _pack(coords)
        ids = np.empty(len(keys), dtype=np.int64)
        fresh_coords = []
        fresh_at = []
        k2i = self._key2id
        nxt = len(self.vcoords)
        for row, k in enumerate(keys.tolist()):
            i = k2i.get(k)
            if i is None:
                i = nxt
                k2i[k] = i
                nxt += 1
                fresh_at.append(row)
            ids[row] = i
        if fresh_at:
            # each new key lands in fresh_at exactly once, in id order
            self.vcoords = np.concatenate([self.vcoords, coords[np.array(fresh_at)]])
        return ids

    def _mid_ids_existing(self, sums) -> np.ndarray:
        """Vertex ids at (sums/2), -1 where no such vertex exists.

        An odd coordinate sum means the midpoint is off the integer
        sublattice, so no vertex can sit there.
        """
        odd = (sums & 1).any(axis=-1)
        keys = _pack(sums >> 1)
        k2i = self._key2id
        flat = keys.ravel()
        out = np.fromiter((k2i.get(k, -1) for k in flat.tolist()),
                          dtype=np.int64, count=flat.size)
        out = out.reshape(keys.shape)
        out[odd] = -1
        return out

    def _orient(self, ids) -> None:
        vol6 = _int_volumes6(self.vcoords[ids])
        neg = vol6 < 0
        ids[neg, 2], ids[neg, 3] = ids[neg, 3].copy(), ids[neg, 2].copy()

    # -- refinement ----------------------------------------------------------

    def split_tets(self, red_ids) -> np.ndarray:
        """1:8 split of the given red tets; returns the new child tet ids."""
        red_ids = np.asarray(red_ids, dtype=np.int64)
        if len(red_ids) == 0:
            return red_ids
        if not self.alive[red_ids].all():
            raise LatticeError("tet already subdivided")
        v = self.vcoords[self.tets[red_ids]]             # (t, 4, 3)
        sums = v[:, TET_EDGES[:, 0]] + v[:, TET_EDGES[:, 1]]
        if np.any(sums & 1):
            raise LatticeError("refinement exceeded the integer sublattice depth")
        mid_ids = self._ensure_vertices((sums >> 1).reshape(-1, 3)).reshape(-1, 6)
        slots = np.concatenate([self.tets[red_ids], mid_ids], axis=1)  # (t, 10)

        d = np.stack([((sums[:, b - 4] - sums[:, a - 4]) ** 2).sum(axis=1)
                      for a, b in _DIAG_PAIRS], axis=1)
        diag = np.argmin(d, axis=1)  # first index wins ties

        children = np.empty((len(red_ids), 8, 4), dtype=np.int64)
        corner = np.array(_RED_CORNER_CHILDREN)
        children[:, :4] = slots[:, corner]
        for dchoice, pattern in _RED_OCTA_CHILDREN.items():
            rows = diag == dchoice
            if rows.any():
                children[rows, 4:] = slots[rows][:, np.array(pattern)]
        flat = children.reshape(-1, 4)
        self._orient(flat)
        new_ids = np.arange(len(self.tets), len(self.tets) + len(flat))
        self.tets = np.concatenate([self.tets, flat])
        self.levels = np.concatenate([
            self.levels, np.repeat(self.levels[red_ids] + 1, 8).astype(np.int16)])
        self.parent = np.concatenate([self.parent, np.repeat(red_ids, 8)])
        self.alive = np.concatenate([self.alive, np.ones(len(flat), dtype=bool)])
        self.alive[red_ids] = False
        return new_ids

    def _edge_mid_sums(self, ids):
        v = self.vcoords[self.tets[ids]]
        return v[:, TET_EDGES[:, 0]] + v[:, TET_EDGES[:, 1]]

    def _masks(self, ids) -> np.ndarray:
        """6-bit mask of edges whose midpoint vertex already exists."""
        sums = self._edge_mid_sums(ids)
        mid = self._mid_ids_existing(sums)
        return ((mid >= 0) << np.arange(6)).sum(axis=1)

    def close_green(self) -> None:
        """Re-split red leaves whose hanging midpoints exceed the green
        templates (or whose prospective greens would themselves hang), then
        regenerate the green overlay.  Leaves the mesh conforming."""
        while True:
            ids = np.nonzero(self.alive)[0]
            masks = self._masks(ids)
            bad = ~np.isin(masks, list(_ALLOWED_MASKS))
            upgrade = ids[bad]
            check = ids[~bad & (masks > 0)]
            cmask = masks[~bad & (masks > 0)]
            if len(check):
                hang = self._greens_would_hang(check, cmask)
                upgrade = np.concatenate([upgrade, check[hang]])
            if len(upgrade) == 0:
                break
            if np.any(self.levels[upgrade] >= self.max_levels + 2):
                raise LatticeError("green closure cascaded past the level cap")
            self.split_tets(np.sort(upgrade))
        self._refresh_leaves()

    def _greens_would_hang(self, ids, masks) -> np.ndarray:
        """True where a green template child would still carry a hanging
        midpoint, forcing the red parent to split instead."""
        sums = self._edge_mid_sums(ids)
        mid = self._mid_ids_existing(sums)
        hang = np.zeros(len(ids), dtype=bool)
        vert = self.tets[ids]
        for mask in np.unique(masks):
            rows = np.nonzero(masks == mask)[0]
            tpl = np.array(_GREEN_TEMPLATES[int(mask)])
            slot_coords = np.concatenate(
                [self.vcoords[vert[rows]], (sums[rows] >> 1)], axis=1)
            childs = slot_coords[:, tpl.reshape(-1)].reshape(len(rows), -1, 4, 3)
            e0, e1 = TET_EDGES[:, 0], TET_EDGES[:, 1]
            csums = childs[:, :, e0] + childs[:, :, e1]
            exists = self._mid_ids_existing(
                csums.reshape(-1, 6, 3)) >= 0
            hang[rows] = exists.reshape(len(rows), -1).any(axis=1)
        return hang

    def _refresh_leaves(self) -> None:
        ids = np.nonzero(self.alive)[0]
        masks = self._masks(ids)
        if not np.isin(masks, list(_ALLOWED_MASKS)).all():
            raise LatticeError("internal: non-template hanging configuration")
        self._clean_reds = ids[masks == 0]
        gverts = []
        gparent = []
        for mask in np.unique(masks):
            if mask == 0:
                continue
            rows = ids[masks == mask]
            sums = self._edge_mid_sums(rows)
            mid = self._mid_ids_existing(sums)
            slots = np.concatenate([self.tets[rows], mid], axis=1)
            tpl = np.array(_GREEN_TEMPLATES[int(mask)])
            g = slots[:, tpl.reshape(-1)].reshape(-1, 4)
            gverts.append(g)
            gparent.append(np.repeat(rows, len(tpl)))
        if gverts:
            g = np.concatenate(gverts)
            self._orient(g)
            self._greens = g
            self._green_parent = np.concatenate(gparent)
        else:
            self._greens = np.zeros((0, 4), dtype=np.int64)
            self._green_parent = np.zeros(0, dtype=np.int64)

    # -- extraction ----------------------------------------------------------

    def _labels_at(self, centroids) -> np.ndarray:
        if not self.fields:
            return self.vol.label_at(centroids)
        lab = np.zeros(len(centroids), dtype=np.int64)
        best = np.zeros(len(centroids))
        for m in sorted(self.fields):
            v = self.fields[m].sample(centroids)
            upd = v > best
            lab[upd] = m
            best[upd] = v[upd]
        return lab

    def snapshot(self) -> tuple[TetMesh, np.ndarray]:
        """Current conforming mesh plus per-tet engine references.

        The reference is the red tet id for red leaves and ``-(parent+1)``
        for green overlay tets, which is what marking needs to route a split
        back to a red ancestor.
        """
        reds = self._clean_reds
        all_tets = np.concatenate([self.tets[reds], self._greens])
        refs = np.concatenate([reds, -(self._green_parent + 1)])
        colors = np.concatenate([
            np.full(len(reds), RED, dtype=np.uint8),
            np.full(len(self._greens), GREEN, dtype=np.uint8)])
        levels = np.concatenate([self.levels[reds],
                                 self.levels[self._green_parent]]).astype(np.int16)
        parents = np.concatenate([self.parent[reds], self._green_parent])

        used, inv = np.unique(all_tets, return_inverse=True)
        coords = self.vcoords[used]
        verts = self.origin + coords.astype(np.float64) * self.unit
        tets = inv.reshape(-1, 4).astype(np.int64)
        centroids = self.origin + (coords[tets].sum(axis=1).astype(np.float64)
                                   * self.unit) / 4.0
        labels = self._labels_at(centroids)
        mesh = TetMesh(vertices=verts, tets=tets, labels=labels, colors=colors,
                       levels=levels, parents=parents,
                       vertices_lattice=coords, lattice_unit=self.unit,
                       lattice_origin=np.asarray(self.origin, dtype=np.float64))
        return mesh, refs

    def route_marks(self, refs, marked_rows) -> np.ndarray:
        """Snapshot rows -> red tet ids to split (greens route to parents),
        respecting the refinement level cap."""
        r = refs[marked_rows]
        red_ids = np.where(r >= 0, r, -r - 1)
        red_ids = np.unique(red_ids)
        return red_ids[self.levels[red_ids] < self.max_levels]

    def refine_rounds(self, fields: dict[int, DistanceField],
                      config: RefinementConfig, extra_marks=None):
        """Mark by distance-field sign change, split, close, and re-test the
        per-material overlap ratios until every unsatisfied material passes
        or nothing is left to split.  Returns the final (mesh, refs, ratios)."""
        extra = np.asarray(extra_marks if extra_marks is not None else [],
                           dtype=np.int64)
        while True:
            mesh, refs = self.snapshot()
            ratios = {}
            unsatisfied = []
            for m in fields:
                f1, f2 = fidelity_ratios(mesh, self.vol, m)
                ratios[m] = (f1, f2)
                F = config.fidelity_for(m)
                if F > f1 or F > f2:
                    unsatisfied.append(m)
            marked_rows = mark_sign_change(mesh, fields, unsatisfied)
            marks = self.route_marks(refs, np.nonzero(marked_rows)[0])
            marks = np.unique(np.concatenate([marks, extra])) if len(extra) else marks
            extra = np.zeros(0, dtype=np.int64)
            if len(marks) == 0:
                return mesh, refs, ratios
            self.split_tets(marks)
            self.close_green()


def _voxels_in_tet(vidx, dims, tol=1e-9) -> np.ndarray:
    """Integer voxel coordinates whose centers lie inside a tet given in
    continuous index space; boundary-inclusive."""
    lo = np.maximum(np.ceil(vidx.min(axis=0) - tol), 0).astype(np.int64)
    hi = np.minimum(np.floor(vidx.max(axis=0) + tol),
                    np.asarray(dims) - 1).astype(np.int64)
    if np.any(hi < lo):
        return np.zeros((0, 3), dtype=np.int64)
    gx, gy, gz = np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)],
                             indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(np.float64)
    inside = np.ones(len(pts), dtype=bool)
    for f in range(4):
        a, b, c = vidx[TET_FACES[f]]
        n = np.cross(b - a, c - a)
        opp = vidx[f]
        s = np.dot(opp - a, n)
        if s > 0:
            n = -n  # make the normal outward
        d = (pts - a) @ n
        inside &= d <= tol * max(np.linalg.norm(n), 1.0)
    return pts[inside].astype(np.int64)


def build_bcc(vol: LabeledVolume, lattice_sp: float, max_levels: int = 10,
              fields: dict[int, DistanceField] | None = None) -> TetMesh:
    """Unrefined BCC lattice over the volume, wholly-outside tets discarded,
    tets labeled at their centroids (see AdaptiveLattice)."""
    eng = AdaptiveLattice(vol, lattice_sp, max_levels=max_levels, fields=fields)
    mesh, _ = eng.snapshot()
    return mesh


def mark_sign_change(mesh: TetMesh, fields: dict[int, DistanceField],
                     materials=None) -> np.ndarray:
    """Boolean row mask of tets whose material distance field changes sign
    between centroid and at least one vertex (trilinear samples; exact zero
    counts as a sign of its own)."""
    if materials is None:
        materials = list(fields)
    out = np.zeros(len(mesh.tets), dtype=bool)
    if not len(mesh.tets):
        return out
    centroids = mesh.vertices[mesh.tets].mean(axis=1)
    for m in materials:
        rows = np.nonzero(mesh.labels == m)[0]
        if not len(rows):
            continue
        f = fields[m]
        vs = f.sample(mesh.vertices[mesh.tets[rows]].reshape(-1, 3)).reshape(-1, 4)
        cs = f.sample(centroids[rows])
        smask = np.sign(vs) != np.sign(cs)[:, None]
        out[rows] = smask.any(axis=1)
    return out


def needs_refinement(mesh: TetMesh, tet_id: int,
                     fields: dict[int, DistanceField],
                     vol: LabeledVolume) -> bool:
    """Sign-change criterion for a single tet, using the field of the
    material whose voxel contains the tet centroid; background -> False."""
    centroid = mesh.vertices[mesh.tets[tet_id]].mean(axis=0)
    m = int(vol.label_at(centroid[None])[0])
    if m == 0 or m not in fields:
        return False
    f = fields[m]
    vs = f.sample(mesh.vertices[mesh.tets[tet_id]])
    cs = f.sample(centroid[None])[0]
    return bool(np.any(np.sign(vs) != np.sign(cs)))


def material_coverage_mask(mesh: TetMesh, vol: LabeledVolume,
                           material: int) -> np.ndarray:
    """Boolean voxel mask of centers covered by the material's sub-mesh.

    Tets are batched by bounding-box shape so the point-in-tet tests run as
    single array operations per group.
    """
    mask = np.zeros(vol.dims, dtype=bool)
    rows = np.nonzero(np.asarray(mesh.labels) == material)[0]
    if not len(rows):
        return mask
    tol = 1e-9
    dims = np.asarray(vol.dims)
    vidx = vol.physical_to_index(
        mesh.vertices[mesh.tets[rows]].reshape(-1, 3)).reshape(-1, 4, 3)
    lo = np.maximum(np.ceil(vidx.min(axis=1) - tol), 0).astype(np.int64)
    hi = np.minimum(np.floor(vidx.max(axis=1) + tol), dims - 1).astype(np.int64)
    shape = hi - lo + 1
    ok = (shape > 0).all(axis=1)
    vidx, lo, shape = vidx[ok], lo[ok], shape[ok]
    if not len(vidx):
        return mask

    # outward face normals and plane offsets, batched
    a = vidx[:, TET_FACES[:, 0]]                      # (t, 4, 3)
    n = np.cross(vidx[:, TET_FACES[:, 1]] - a, vidx[:, TET_FACES[:, 2]] - a)
    opp = vidx[:, [0, 1, 2, 3]]
    flip = np.einsum("tfk,tfk->tf", opp - a, n) > 0
    n[flip] *= -1.0
    margin = tol * np.maximum(np.linalg.norm(n, axis=2), 1.0)

    key = shape[:, 0] * 1_000_000 + shape[:, 1] * 1000 + shape[:, 2]
    for k in np.unique(key):
        grp = np.nonzero(key == k)[0]
        s = shape[grp[0]]
        bx, by, bz = np.meshgrid(np.arange(s[0]), np.arange(s[1]), np.arange(s[2]),
                                 indexing="ij")
        box = np.stack([bx, by, bz], axis=-1).reshape(-1, 3)     # (p, 3)
        pts = (lo[grp][:, None, :] + box[None, :, :]).astype(np.float64)  # (g, p, 3)
        inside = np.ones(pts.shape[:2], dtype=bool)
        for f in range(4):
            rel = pts - a[grp][:, f][:, None, :]
            d = np.einsum("gpk,gk->gp", rel, n[grp][:, f])
            inside &= d <= margin[grp][:, f, None]
        hit = pts[inside].astype(np.int64)
        if len(hit):
            mask[hit[:, 0], hit[:, 1], hit[:, 2]] = True
    return mask


def fidelity_ratios(mesh: TetMesh, vol: LabeledVolume,
                    material: int) -> tuple[float, float]:
    """(F1, F2) overlap ratios between the sub-mesh voxel set S1 and the
    material voxel set S2: F1 = |S1 n S2| / |S1|, F2 = |S1 n S2| / |S2|."""
    s1 = material_coverage_mask(mesh, vol, material)
    s2 = vol.labels == material
    n1 = int(s1.sum())
    n2 = int(s2.sum())
    if n1 == 0:
        return 0.0, 0.0
    common = int((s1 & s2).sum())
    return common / n1, (common / n2 if n2 else 0.0)


# ---------------------------------------------------------------------------
# candidate mesh selection

def _background_faces(labels, nb) -> np.ndarray:
    """Per tet: number of faces against background tets or the mesh exterior."""
    neigh_label = np.where(nb >= 0, labels[np.clip(nb, 0, None)], 0)
    return (neigh_label == 0).sum(axis=1)


def select_candidate_mesh(mesh: TetMesh, max_passes: int = 50):
    """Redistribute labels so every non-background tet touches background
    through at most one face, then drop the background tets.

    A tet with fewer than three same-label face neighbors is relabeled to a
    neighboring label, preferring labels whose sweep has not finished yet
    (labels are swept in ascending order), then the most frequent neighbor
    label, then the smallest.  Returns (candidate TetMesh, kept row indices).
    """
    labels = np.asarray(mesh.labels).copy()
    nb = mesh.neighbors()

    def neighbor_labels(t):
        out = []
        for f in range(4):
            n = nb[t, f]
            out.append(0 if n < 0 else int(labels[n]))
        return out

    for _ in range(max_passes):
        changed = False
        finalized: set[int] = set()
        for m in sorted(int(x) for x in np.unique(labels)):
            rows = np.nonzero(labels == m)[0]
            for t in rows:
                if labels[t] != m:
                    continue  # already moved by an earlier relabel this pass
                nl = neighbor_labels(t)
                if sum(1 for x in nl if x == m) >= 3:
                    continue
                cand = [x for x in nl if x != m]
                if not cand:
                    continue
                fresh = [x for x in cand if x not in finalized]
                pool = fresh if fresh else cand
                counts = {}
                for x in pool:
                    counts[x] = counts.get(x, 0) + 1
                top = max(counts.values())
                labels[t] = min(x for x, c in counts.items() if c == top)
                changed = True
            finalized.add(m)
        bad = (labels != 0) & (_background_faces(labels, nb) > 1)
        if not bad.any():
            break
        if not changed:
            # stalled: pushing stubborn surface tets to background always
            # makes progress and only removes material
            labels[bad] = 0
    else:
        while True:
            bad = (labels != 0) & (_background_faces(labels, nb) > 1)
            if not bad.any():
                break
            labels[bad] = 0

    keep = np.nonzero(labels != 0)[0]
    sub = _submesh(mesh, keep, labels[keep])
    return sub, keep


def _submesh(mesh: TetMesh, rows, new_labels=None) -> TetMesh:
    rows = np.asarray(rows)
    tets = mesh.tets[rows]
    used, inv = np.unique(tets, return_inverse=True)
    return TetMesh(
        vertices=mesh.vertices[used],
        tets=inv.reshape(-1, 4).astype(np.int64),
        labels=(mesh.labels[rows] if new_labels is None
                else np.asarray(new_labels)).copy(),
        colors=mesh.colors[rows].copy(),
        levels=mesh.levels[rows].copy(),
        parents=None if mesh.parents is None else mesh.parents[rows].copy(),
        vertices_lattice=(None if mesh.vertices_lattice is None
                          else mesh.vertices_lattice[used]),
        lattice_unit=mesh.lattice_unit,
        lattice_origin=mesh.lattice_origin,
    )


# ---------------------------------------------------------------------------
# mesh topological checks

@dataclass
class TopologyReport:
    nonmanifold_vertices: dict = field(default_factory=dict)  # label -> count
    nonmanifold_edges: dict = field(default_factory=dict)
    disconnected: dict = field(default_factory=dict)          # label -> extra regions
    small_regions_relabeled: list = field(default_factory=list)
    local_marks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    global_materials: list = field(default_factory=list)
    unresolved: bool = False

    def clean(self) -> bool:
        return (not any(self.nonmanifold_vertices.values())
                and not any(self.nonmanifold_edges.values())
                and not any(self.disconnected.values()))

    def to_dict(self) -> dict:
        return {
            "nonmanifold_vertices": {str(k): int(v) for k, v in
                                     self.nonmanifold_vertices.items()},
            "nonmanifold_edges": {str(k): int(v) for k, v in
                                  self.nonmanifold_edges.items()},
            "disconnected": {str(k): int(v) for k, v in self.disconnected.items()},
            "small_regions_relabeled": [list(map(int, r))
                                        for r in self.small_regions_relabeled],
            "unresolved": bool(self.unresolved),
        }


class _UnionFind:
    def __init__(self, n):
        self.p = list(range(n))

    def find(self, a):
        p = self.p
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.p[rb] = ra


def _submesh_structure(mesh, rows):
    """Face adjacency restricted to one label's tets plus vertex incidence."""
    nb = mesh.neighbors()
    inset = np.zeros(len(mesh.tets), dtype=bool)
    inset[rows] = True
    local = {int(t): i for i, t in enumerate(rows)}
    adj = [[] for _ in rows]
    for i, t in enumerate(rows):
        for f in range(4):
            n = nb[t, f]
            if n >= 0 and inset[n]:
                adj[i].append(local[int(n)])
    vert_inc: dict[int, list] = {}
    for i, t in enumerate(rows):
        for v in mesh.tets[t]:
            vert_inc.setdefault(int(v), []).append(i)
    return adj, vert_inc


def _star_components(members, adj_sets):
    uf = _UnionFind(len(members))
    index = {m: i for i, m in enumerate(members)}
    for i, m in enumerate(members):
        for n in adj_sets[m]:
            j = index.get(n)
            if j is not None:
                uf.union(i, j)
    return len({uf.find(i) for i in range(len(members))})


def check_topology(mesh: TetMesh, small_fraction: float = 0.01):
    """Per-material manifoldness and connectivity check.

    Vertex-connected flood fill defines the material's regions; non-manifold
    vertices/edges are sites where the face-connected star splits.  Regions
    under ``small_fraction`` of their material's volume are relabeled to a
    neighboring region's label (cancelled if that would create a new
    non-manifold site).  Returns ``(mesh', report)``: surviving non-manifold
    sites mark surrounding tets for local subdivision, surviving disconnected
    materials are listed for global subdivision.
    """
    mesh = mesh.copy()
    report = TopologyReport()
    vols = tet_volumes(mesh.vertices, mesh.tets)
    changed = True
    guard = 0
    while changed and guard < 20:
        changed = False
        guard += 1
        labels = mesh.labels
        for m in sorted(int(x) for x in np.unique(labels)):
            if m == 0:
                continue
            rows = np.nonzero(labels == m)[0]
            if not len(rows):
                continue
            comp_sizes, comps = _vertex_components(mesh, rows)
            if len(comp_sizes) <= 1:
                continue
            total = vols[rows].sum()
            order = np.argsort([-s for s in comp_sizes])
            for ci in order[1:]:
                region = rows[comps == ci]
                if vols[region].sum() / total >= small_fraction:
                    continue
                target = _majority_outside_label(mesh, region)
                if target == m:
                    continue
                before = _nm_counts(mesh, m) + _nm_counts(mesh, target)
                old = labels[region].copy()
                labels[region] = target
                after = _nm_counts(mesh, m) + _nm_counts(mesh, target)
                if after > before:
                    labels[region] = old  # cancelled: would create non-manifoldness
                else:
                    report.small_regions_relabeled.append(
                        (m, int(len(region)), int(target)))
                    changed = True
    # drop tets pushed to background by the small-region pass
    keep = np.nonzero(mesh.labels != 0)[0]
    if len(keep) != len(mesh.tets):
        mesh = _submesh(mesh, keep)
    marks = []
    for m in sorted(int(x) for x in np.unique(mesh.labels)):
        rows = np.nonzero(mesh.labels == m)[0]
        nmv, nme, star_marks = _nonmanifold_sites(mesh, rows)
        comp_sizes, _ = _vertex_components(mesh, rows)
        report.nonmanifold_vertices[m] = nmv
        report.nonmanifold_edges[m] = nme
        report.disconnected[m] = max(len(comp_sizes) - 1, 0)
        marks.extend(star_marks)
        if len(comp_sizes) > 1:
            report.global_materials.append(m)
    report.local_marks = np.unique(np.asarray(marks, dtype=np.int64)) \
        if marks else np.zeros(0, dtype=np.int64)
    return mesh, report


def _vertex_components(mesh, rows):
    adj, vert_inc = _submesh_structure(mesh, rows)
    uf = _UnionFind(len(rows))
    for members in vert_inc.values():
        for other in members[1:]:
            uf.union(members[0], other)
    roots = np.array([uf.find(i) for i in range(len(rows))])
    _, comps = np.unique(roots, return_inverse=True)
    sizes = np.bincount(comps)
    return list(sizes), comps


def _nonmanifold_sites(mesh, rows):
    """Counts of non-manifold vertices/edges in one label's sub-mesh plus the
    surrounding tet rows (global ids) to mark."""
    adj, vert_inc = _submesh_structure(mesh, rows)
    adj_sets = [set(a) for a in adj]
    nmv = 0
    marks = []
    for v, members in vert_inc.items():
        if len(members) < 2:
            continue
        if _star_components(members, adj_sets) > 1:
            nmv += 1
            marks.extend(rows[i] for i in members)
    edge_inc: dict[tuple, list] = {}
    for i, t in enumerate(rows):
        tv = np.sort(mesh.tets[t])
        for a in range(4):
            for b in range(a + 1, 4):
                edge_inc.setdefault((int(tv[a]), int(tv[b])), []).append(i)
    nme = 0
    for e, members in edge_inc.items():
        if len(members) < 2:
            continue
        if _star_components(members, adj_sets) > 1:
            nme += 1
            marks.extend(rows[i] for i in members)
    return nmv, nme, marks


def _majority_outside_label(mesh, region):
    nb = mesh.neighbors()
    inreg = np.zeros(len(mesh.tets), dtype=bool)
    inreg[region] = True
    votes: dict[int, int] = {}
    for t in region:
        for f in range(4):
            n = nb[t, f]
            lab = 0 if n < 0 else int(mesh.labels[n])
            if n >= 0 and inreg[n]:
                continue
            votes[lab] = votes.get(lab, 0) + 1
    if not votes:
        return 0
    top = max(votes.values())
    return min(l for l, c in votes.items() if c == top)


def _nm_counts(mesh, label):
    if label == 0:
        return 0
    rows = np.nonzero(mesh.labels == label)[0]
    if not len(rows):
        return 0
    nmv, nme, _ = _nonmanifold_sites(mesh, rows)
    return nmv + nme


# ---------------------------------------------------------------------------
# full adaptive generation

@dataclass
class LatticeResult:
    mesh: TetMesh
    ratios: dict
    topology: TopologyReport | None
    topo_rounds: int = 0


def generate_adaptive_mesh(vol: LabeledVolume, fields: dict[int, DistanceField],
                           config: RefinementConfig) -> LatticeResult:
    """The full lattice stage: build, refine to fidelity, select the
    candidate mesh, and (optionally) iterate topological checks, feeding
    local/global subdivision marks back into refinement."""
    eng = AdaptiveLattice(vol, config.lattice_sp, max_levels=config.max_levels,
                          fields=fields)
    mesh, refs, ratios = eng.refine_rounds(fields, config)
    candidate, keep = select_candidate_mesh(mesh)
    if not config.topo_checks:
        return LatticeResult(candidate, ratios, None)
    rounds = 0
    while True:
        candidate, report = check_topology(candidate)
        rounds += 1
        if report.clean():
            return LatticeResult(candidate, ratios, report, rounds)
        # route both local and global marks to splittable red ancestors
        rows = list(report.local_marks)
        for m in report.global_materials:
            rows.extend(np.nonzero(candidate.labels == m)[0])
        # candidate rows -> pre-discard snapshot rows -> engine marks;
        # check_topology may have dropped rows, so map through vertex-set
        # identity on the original snapshot
        snap_rows = _match_rows(mesh, candidate, rows, keep)
        marks = eng.route_marks(refs, snap_rows)
        if len(marks) == 0:
            report.unresolved = True
            return LatticeResult(candidate, ratios, report, rounds)
        eng.split_tets(marks)
        eng.close_green()
        mesh, refs, ratios = eng.refine_rounds(fields, config)
        candidate, keep = select_candidate_mesh(mesh)


def _match_rows(snapshot: TetMesh, candidate: TetMesh, cand_rows, keep):
    """Map candidate tet rows back to snapshot rows via their vertex keys."""
    if not len(cand_rows):
        return np.zeros(0, dtype=np.int64)
    skeys = {}
    for r in keep:
        key = tuple(sorted(_pack(snapshot.vertices_lattice[snapshot.tets[r]]).tolist()))
        skeys[key] = r
    out = []
    for r in cand_rows:
        key = tuple(sorted(_pack(candidate.vertices_lattice[candidate.tets[r]]).tolist()))
        if key in skeys:
            out.append(skeys[key])
    return np.asarray(out, dtype=np.int64)
