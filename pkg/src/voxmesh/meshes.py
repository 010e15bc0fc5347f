"""Tetrahedral and mixed-element mesh containers plus shared cell utilities.

Vertices live in physical mm coordinates.  Lattice-derived meshes also carry
exact integer lattice coordinates (``vertices_lattice`` scaled by
``lattice_unit`` from ``lattice_origin``), which make conformity and midpoint
queries exact.

Cell corner orderings follow the usual unstructured-grid conventions:
tetrahedron (type 10), hexahedron (type 12) with the bottom quad 0-3 and top
quad 4-7, pyramid (type 14) with quad base 0-3 and apex 4.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RED = 0
GREEN = 1

TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
# face i is opposite corner i, wound so its normal points away from corner i
TET_FACES = np.array([(1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1)])

HEX_EDGES = np.array([(0, 1), (1, 2), (2, 3), (3, 0),
                      (4, 5), (5, 6), (6, 7), (7, 4),
                      (0, 4), (1, 5), (2, 6), (3, 7)])
HEX_QUADS = np.array([(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4),
                      (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7)])
# per corner: the three edge endpoints forming a right-handed frame on a cube
HEX_CORNER_FRAMES = np.array([(1, 3, 4), (2, 0, 5), (3, 1, 6), (0, 2, 7),
                              (7, 5, 0), (4, 6, 1), (5, 7, 2), (6, 4, 3)])

PYR_EDGES = np.array([(0, 1), (1, 2), (2, 3), (3, 0),
                      (0, 4), (1, 4), (2, 4), (3, 4)])
PYR_TRIS = np.array([(0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)])
PYR_QUAD = np.array([(0, 3, 2, 1)])


def tet_volumes(vertices, tets) -> np.ndarray:
    """Signed volumes; positive for the orientation used throughout."""
    p = vertices[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def orient_tets(vertices, tets) -> np.ndarray:
    """Swap two corners of negatively oriented tets (in place) and return."""
    neg = tet_volumes(vertices, tets) < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3].copy(), tets[neg, 2].copy()
    return tets


def pyramid_volumes(vertices, pyramids) -> np.ndarray:
    va = tet_volumes(vertices, pyramids[:, [0, 1, 2, 4]])
    vb = tet_volumes(vertices, pyramids[:, [0, 2, 3, 4]])
    return va + vb


def hex_volumes(vertices, hexes) -> np.ndarray:
    # hexes emitted by this package are axis-aligned at creation, but after
    # deformation the general 5-tet decomposition is needed
    out = np.zeros(len(hexes))
    for tet in ((0, 1, 3, 4), (1, 2, 3, 6), (1, 5, 6, 4), (3, 6, 7, 4), (1, 6, 3, 4)):
        out += tet_volumes(vertices, hexes[:, tet])
    return out


@dataclass
class TetMesh:
    """Labeled tetrahedral mesh with red/green refinement bookkeeping."""

    vertices: np.ndarray             # (n, 3) float64 mm
    tets: np.ndarray                 # (m, 4) int32
    labels: np.ndarray               # (m,)
    colors: np.ndarray               # (m,) uint8, RED or GREEN
    levels: np.ndarray               # (m,) int16, depth of the red ancestry
    parents: np.ndarray | None = None  # (m,) red parent tet reference or -1
    vertices_lattice: np.ndarray | None = None  # (n, 3) int64 exact coords
    lattice_unit: float | None = None
    lattice_origin: np.ndarray | None = None
    _neighbors: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def neighbors(self) -> np.ndarray:
        """(m, 4) face-adjacent tet ids; entry f is across the face opposite
        corner f; -1 where the face is on the mesh boundary."""
        if self._neighbors is None:
            self._neighbors = _face_neighbors(self.tets)
        return self._neighbors

    def boundary_triangles(self) -> np.ndarray:
        """(b, 3) sorted vertex triples of faces owned by exactly one tet."""
        faces = self.tets[:, TET_FACES].reshape(-1, 3)
        faces = np.sort(faces, axis=1)
        uniq, counts = np.unique(faces, axis=0, return_counts=True)
        return uniq[counts == 1]

    def copy(self) -> "TetMesh":
        return TetMesh(
            self.vertices.copy(), self.tets.copy(), self.labels.copy(),
            self.colors.copy(), self.levels.copy(),
            None if self.parents is None else self.parents.copy(),
            None if self.vertices_lattice is None else self.vertices_lattice.copy(),
            self.lattice_unit,
            None if self.lattice_origin is None else self.lattice_origin.copy(),
        )


def _face_neighbors(tets) -> np.ndarray:
    m = len(tets)
    faces = np.sort(tets[:, TET_FACES].reshape(-1, 3), axis=1)
    order = np.lexsort((faces[:, 2], faces[:, 1], faces[:, 0]))
    sf = faces[order]
    same = np.all(sf[1:] == sf[:-1], axis=1)
    nb = np.full(4 * m, -1, dtype=np.int64)
    idx = order  # row r of faces belongs to tet r // 4, local face r % 4
    hit = np.nonzero(same)[0]
    a, b = idx[hit], idx[hit + 1]
    nb[a] = b // 4
    nb[b] = a // 4
    return nb.reshape(m, 4)


@dataclass
class MixedMesh:
    """Tetrahedra plus transition pyramids and hexahedra, one label per cell."""

    vertices: np.ndarray
    tets: np.ndarray                 # (mt, 4)
    pyramids: np.ndarray             # (mp, 5)
    hexes: np.ndarray                # (mh, 8)
    tet_labels: np.ndarray
    pyr_labels: np.ndarray
    hex_labels: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def cell_blocks(self):
        """(kind, connectivity, labels) triples for the non-empty cell kinds."""
        out = []
        if len(self.tets):
            out.append(("tet", self.tets, self.tet_labels))
        if len(self.pyramids):
            out.append(("pyramid", self.pyramids, self.pyr_labels))
        if len(self.hexes):
            out.append(("hex", self.hexes, self.hex_labels))
        return out

    def total_volume(self) -> float:
        v = 0.0
        if len(self.tets):
            v += tet_volumes(self.vertices, self.tets).sum()
        if len(self.pyramids):
            v += pyramid_volumes(self.vertices, self.pyramids).sum()
        if len(self.hexes):
            v += hex_volumes(self.vertices, self.hexes).sum()
        return float(v)

    def copy(self) -> "MixedMesh":
        return MixedMesh(self.vertices.copy(), self.tets.copy(), self.pyramids.copy(),
                         self.hexes.copy(), self.tet_labels.copy(),
                         self.pyr_labels.copy(), self.hex_labels.copy())


def as_mixed(mesh) -> MixedMesh:
    """View a TetMesh as a MixedMesh with empty pyramid/hex blocks."""
    if isinstance(mesh, MixedMesh):
        return mesh
    empty5 = np.zeros((0, 5), dtype=np.int64)
    empty8 = np.zeros((0, 8), dtype=np.int64)
    return MixedMesh(mesh.vertices, np.asarray(mesh.tets, dtype=np.int64),
                     empty5, empty8,
                     np.asarray(mesh.labels), np.zeros(0, dtype=np.int64),
                     np.zeros(0, dtype=np.int64))


_KIND_EDGES = {"tet": TET_EDGES, "pyramid": PYR_EDGES, "hex": HEX_EDGES}
_KIND_TRIS = {"tet": TET_FACES, "pyramid": PYR_TRIS, "hex": np.zeros((0, 3), dtype=int)}
_KIND_QUADS = {"tet": np.zeros((0, 4), dtype=int), "pyramid": PYR_QUAD, "hex": HEX_QUADS}


def surface_and_interface_vertices(mesh) -> tuple[np.ndarray, list[frozenset]]:
    """Vertices on the mesh boundary or on interfaces between labels.

    Returns (vertex ids ascending, incident non-background label set per id).
    A vertex qualifies if it lies on a face owned by one cell only, or if its
    incident cells carry more than one label.
    """
    mm = as_mixed(mesh)
    n = mm.n_vertices
    label_sets = [set() for _ in range(n)]
    face_count = {}
    for kind, conn, labels in mm.cell_blocks():
        for c, lab in zip(conn, labels):
            for v in c:
                label_sets[v].add(int(lab))
        for tri in _KIND_TRIS[kind]:
            f = np.sort(conn[:, tri], axis=1)
            for row in f:
                key = tuple(row)
                face_count[key] = face_count.get(key, 0) + 1
        for quad in _KIND_QUADS[kind]:
            f = np.sort(conn[:, quad], axis=1)
            for row in f:
                key = tuple(row)
                face_count[key] = face_count.get(key, 0) + 1
    on_boundary = np.zeros(n, dtype=bool)
    for key, cnt in face_count.items():
        if cnt == 1:
            for v in key:
                on_boundary[v] = True
    ids = [v for v in range(n)
           if on_boundary[v] or len(label_sets[v]) > 1]
    ids = np.array(ids, dtype=np.int64)
    return ids, [frozenset(label_sets[v]) for v in ids]


def vertex_mean_edge_length(mesh, vertex_ids) -> np.ndarray:
    """Average length of the cell edges incident to each requested vertex."""
    mm = as_mixed(mesh)
    sums = np.zeros(mm.n_vertices)
    counts = np.zeros(mm.n_vertices, dtype=np.int64)
    for kind, conn, _ in mm.cell_blocks():
        edges = _KIND_EDGES[kind]
        for a, b in edges:
            va, vb = conn[:, a], conn[:, b]
            ln = np.linalg.norm(mm.vertices[va] - mm.vertices[vb], axis=1)
            np.add.at(sums, va, ln)
            np.add.at(sums, vb, ln)
            np.add.at(counts, va, 1)
            np.add.at(counts, vb, 1)
    counts = np.maximum(counts, 1)
    return (sums / counts)[vertex_ids]
