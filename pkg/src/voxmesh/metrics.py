"""Mesh quality and fidelity measurement.

Dihedral angles (degrees, interior), scaled Jacobians for hexahedra and
pyramids, 5-degree angle histograms, and the two-sided Hausdorff distance
between mesh surface vertices and boundary voxel centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .meshes import (HEX_CORNER_FRAMES, TET_EDGES, MixedMesh, TetMesh, as_mixed,
                     tet_volumes)
from .volume import LabeledVolume, boundary_voxels


def dihedral_angles(tet_vertices) -> np.ndarray:
    """Interior dihedral angles in degrees, one per edge.

    Accepts a single tet (4, 3) or a batch (m, 4, 3) and returns (6,) or
    (m, 6), ordered as the edges (01, 02, 03, 12, 13, 23).
    """
    p = np.asarray(tet_vertices, dtype=np.float64)
    single = p.ndim == 2
    if single:
        p = p[None]
    if np.any(np.abs(_batch_volume(p)) < 1e-300):
        raise ValueError("degenerate (zero-volume) tetrahedron")
    angles = np.empty((len(p), 6))
    # opposite vertex pairs for each edge
    others = {(0, 1): (2, 3), (0, 2): (1, 3), (0, 3): (1, 2),
              (1, 2): (0, 3), (1, 3): (0, 2), (2, 3): (0, 1)}
    for e, (a, b) in enumerate(TET_EDGES):
        c, d = others[(a, b)]
        t = p[:, b] - p[:, a]
        t = t / np.linalg.norm(t, axis=1, keepdims=True)
        u = p[:, c] - p[:, a]
        v = p[:, d] - p[:, a]
        u = u - np.einsum("ij,ij->i", u, t)[:, None] * t
        v = v - np.einsum("ij,ij->i", v, t)[:, None] * t
        nu = np.linalg.norm(u, axis=1)
        nv = np.linalg.norm(v, axis=1)
        cosang = np.einsum("ij,ij->i", u, v) / (nu * nv)
        angles[:, e] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return angles[0] if single else angles


def _batch_volume(p):
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def scaled_jacobian_hex(hex_vertices) -> np.ndarray:
    """Minimum over the 8 corners of the normalized edge-frame determinant.

    1.0 for a cube, negative for inverted cells.  Accepts (8, 3) or (m, 8, 3).
    """
    p = np.asarray(hex_vertices, dtype=np.float64)
    single = p.ndim == 2
    if single:
        p = p[None]
    best = np.full(len(p), np.inf)
    for corner in range(8):
        i, j, k = HEX_CORNER_FRAMES[corner]
        e1 = p[:, i] - p[:, corner]
        e2 = p[:, j] - p[:, corner]
        e3 = p[:, k] - p[:, corner]
        n1 = np.linalg.norm(e1, axis=1)
        n2 = np.linalg.norm(e2, axis=1)
        n3 = np.linalg.norm(e3, axis=1)
        if np.any(n1 * n2 * n3 == 0):
            raise ValueError("coincident corner vertices")
        det = np.einsum("ij,ij->i", e1, np.cross(e2, e3)) / (n1 * n2 * n3)
        best = np.minimum(best, det)
    best = np.clip(best, -1.0, 1.0)
    return best[0] if single else best


def scaled_jacobian_pyramid(pyr_vertices) -> np.ndarray:
    """Minimum normalized edge-frame determinant over the 4 base corners.

    The apex frame of a 5-node pyramid is singular (four incident edges), so
    the base corners govern.  Accepts (5, 3) or (m, 5, 3).
    """
    p = np.asarray(pyr_vertices, dtype=np.float64)
    single = p.ndim == 2
    if single:
        p = p[None]
    best = np.full(len(p), np.inf)
    for corner in range(4):
        nxt = (corner + 1) % 4
        prv = (corner + 3) % 4
        e1 = p[:, nxt] - p[:, corner]
        e2 = p[:, prv] - p[:, corner]
        e3 = p[:, 4] - p[:, corner]
        n1 = np.linalg.norm(e1, axis=1)
        n2 = np.linalg.norm(e2, axis=1)
        n3 = np.linalg.norm(e3, axis=1)
        if np.any(n1 * n2 * n3 == 0):
            raise ValueError("coincident corner vertices")
        det = np.einsum("ij,ij->i", e1, np.cross(e2, e3)) / (n1 * n2 * n3)
        best = np.minimum(best, det)
    best = np.clip(best, -1.0, 1.0)
    return best[0] if single else best


HISTOGRAM_BINS = 36  # 5-degree increments over (0, 180]
_BOUNDARY_SNAP = 1e-9  # degrees; angles this close below a bin edge count as on it


def angle_histogram(mesh) -> np.ndarray:
    """Fractions of all tet dihedral angles per 5-degree bin.

    An angle exactly on a bin boundary belongs to the upper bin, so the
    60/90-degree lattice peaks land in [60, 65) and [90, 95).
    """
    mm = as_mixed(mesh)
    if len(mm.tets) == 0:
        raise ValueError("angle histogram needs at least one tetrahedron")
    ang = dihedral_angles(mm.vertices[mm.tets]).ravel()
    bins = np.floor(ang / 5.0).astype(np.int64)
    snap_up = (5.0 * (bins + 1) - ang) < _BOUNDARY_SNAP
    bins[snap_up] += 1
    bins = np.clip(bins, 0, HISTOGRAM_BINS - 1)
    hist = np.bincount(bins, minlength=HISTOGRAM_BINS).astype(np.float64)
    return hist / hist.sum()


@dataclass
class QualityReport:
    n_tets: int
    n_pyramids: int
    n_hexes: int
    min_dihedral: float
    max_dihedral: float
    min_scaled_jacobian: float | None  # None when there are no hexes/pyramids
    histogram: np.ndarray
    n_vertices: int
    n_vertices_before_mixed: int | None = None

    def to_dict(self) -> dict:
        return {
            "element_counts": {"tet": self.n_tets, "pyramid": self.n_pyramids,
                               "hex": self.n_hexes},
            "min_dihedral_deg": float(self.min_dihedral),
            "max_dihedral_deg": float(self.max_dihedral),
            "min_scaled_jacobian": (None if self.min_scaled_jacobian is None
                                    else float(self.min_scaled_jacobian)),
            "histogram": [float(h) for h in self.histogram],
            "n_vertices": int(self.n_vertices),
            "n_vertices_before_mixed": (None if self.n_vertices_before_mixed is None
                                        else int(self.n_vertices_before_mixed)),
        }


def quality_report(mesh, n_vertices_before_mixed=None) -> QualityReport:
    mm = as_mixed(mesh)
    ang = dihedral_angles(mm.vertices[mm.tets]) if len(mm.tets) else np.zeros((0, 6))
    sj = []
    if len(mm.hexes):
        sj.append(scaled_jacobian_hex(mm.vertices[mm.hexes]))
    if len(mm.pyramids):
        sj.append(scaled_jacobian_pyramid(mm.vertices[mm.pyramids]))
    used = np.unique(np.concatenate(
        [c.ravel() for _, c, _ in mm.cell_blocks()])) if mm.cell_blocks() else []
    return QualityReport(
        n_tets=len(mm.tets),
        n_pyramids=len(mm.pyramids),
        n_hexes=len(mm.hexes),
        min_dihedral=float(ang.min()) if ang.size else float("nan"),
        max_dihedral=float(ang.max()) if ang.size else float("nan"),
        min_scaled_jacobian=float(np.concatenate(sj).min()) if sj else None,
        histogram=angle_histogram(mm) if len(mm.tets) else np.zeros(HISTOGRAM_BINS),
        n_vertices=len(used),
        n_vertices_before_mixed=n_vertices_before_mixed,
    )


# ---------------------------------------------------------------------------
# Hausdorff distance

def _min_sq_dists_brute(query, ref, chunk=512) -> np.ndarray:
    """Exact squared nearest-neighbor distances, O(|query| * |ref|)."""
    out = np.empty(len(query))
    for s in range(0, len(query), chunk):
        q = query[s:s + chunk]
        d = q[:, None, :] - ref[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", d, d).min(axis=1)
    return out


def _ring_cells(ring):
    """Relative cell offsets at exactly Chebyshev distance ``ring``."""
    if ring == 0:
        return [(0, 0, 0)]
    out = []
    r = ring
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                if max(abs(dx), abs(dy), abs(dz)) == r:
                    out.append((dx, dy, dz))
    return out


def _min_sq_dists_grid(query, ref, cell=None) -> np.ndarray:
    """Grid-accelerated nearest-neighbor squared distances.

    Candidate selection walks outward over Chebyshev rings of grid cells; a
    point in ring r is at least (r-1)*cell away, so the search stops once the
    incumbent beats that bound.  Distances use the same subtract-square-sum
    arithmetic as the brute-force path, so results match it bit for bit.
    """
    ref = np.asarray(ref, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if len(ref) == 0:
        raise ValueError("empty reference point set")
    lo = ref.min(axis=0)
    span = float((ref.max(axis=0) - lo).max())
    if cell is None:
        k = int(np.clip(round(len(ref) ** (1 / 3) * 2), 4, 128))
        cell = max(span / k, 1e-12)
    key = np.floor((ref - lo) / cell).astype(np.int64)
    order = np.lexsort((key[:, 2], key[:, 1], key[:, 0]))
    sk = key[order]
    breaks = list(np.nonzero(np.any(sk[1:] != sk[:-1], axis=1))[0] + 1) + [len(order)]
    buckets = {}
    start = 0
    for b in breaks:
        grp = order[start:b]
        if len(grp):
            buckets[tuple(key[grp[0]])] = grp
        start = b
    kmax = key.max(axis=0)

    out = np.empty(len(query))
    qkey = np.floor((query - lo) / cell).astype(np.int64)
    # queries sharing a grid cell walk the rings together
    qorder = np.lexsort((qkey[:, 2], qkey[:, 1], qkey[:, 0]))
    sq = qkey[qorder]
    qbreaks = list(np.nonzero(np.any(sq[1:] != sq[:-1], axis=1))[0] + 1) + [len(qorder)]
    start = 0
    for b in qbreaks:
        grp = qorder[start:b]
        start = b
        if not len(grp):
            continue
        kq = qkey[grp[0]]
        q = query[grp]
        best = np.full(len(grp), np.inf)
        last_ring = int(np.max(np.maximum(np.abs(kq), np.abs(kq - kmax)))) + 1
        for ring in range(last_ring + 1):
            if ring >= 1 and best.max() <= ((ring - 1) * cell) ** 2:
                break
            cand = []
            for off in _ring_cells(ring):
                bucket = buckets.get((kq[0] + off[0], kq[1] + off[1], kq[2] + off[2]))
                if bucket is not None:
                    cand.append(bucket)
            if cand:
                pts = ref[np.concatenate(cand)]
                d = q[:, None, :] - pts[None, :, :]
                best = np.minimum(best, np.einsum("ijk,ijk->ij", d, d).min(axis=1))
        out[grp] = best
    return out


def directed_hausdorff_sq(a, b, brute=False) -> float:
    """max over a of min squared distance to b."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point set")
    f = _min_sq_dists_brute if brute else _min_sq_dists_grid
    return float(f(np.asarray(a, float), np.asarray(b, float)).max())


@dataclass
class FidelityReport:
    per_material: dict  # label -> {"hd": x, "image_to_mesh": y, "mesh_to_image": z}
    hd: float           # max over materials
    stage: str = "post-deformation"

    def to_dict(self) -> dict:
        return {
            "per_material": {str(k): {kk: float(vv) for kk, vv in v.items()}
                             for k, v in self.per_material.items()},
            "hd_mm": float(self.hd),
            "stage": self.stage,
        }


def hausdorff(mesh, vol: LabeledVolume, fields=None, brute=False,
              stage="post-deformation") -> FidelityReport:
    """Two-sided Hausdorff distance per material and its max.

    Mesh side: surface/interface vertices whose incident labels include the
    material.  Image side: centers of the material's boundary voxels (signed
    distance exactly zero).
    """
    from .meshes import surface_and_interface_vertices

    mm = as_mixed(mesh)
    ids, sets = surface_and_interface_vertices(mm)
    per = {}
    worst = 0.0
    for m in (int(x) for x in vol.materials()):
        a = mm.vertices[[i for i, s in zip(ids, sets) if m in s]]
        bmask = boundary_voxels(vol, m)
        bidx = np.argwhere(bmask)
        b = vol.origin + bidx * vol.spacing
        if len(a) == 0 or len(b) == 0:
            raise ValueError(f"empty point set for material {m}")
        m2i = np.sqrt(directed_hausdorff_sq(a, b, brute=brute))
        i2m = np.sqrt(directed_hausdorff_sq(b, a, brute=brute))
        hd = max(m2i, i2m)
        per[m] = {"hd": hd, "mesh_to_image": m2i, "image_to_mesh": i2m}
        worst = max(worst, hd)
    return FidelityReport(per_material=per, hd=worst, stage=stage)
