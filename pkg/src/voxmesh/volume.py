"""Labeled voxel volumes, signed distance fields, synthetic phantoms, and file I/O.

A volume is a dense 3D grid of unsigned integer material labels (0 is
background) with per-axis physical spacing and an origin at the center of
voxel (0, 0, 0).  Arrays are indexed ``labels[i, j, k]``; the raw file format
stores voxels x-fastest (Fortran order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class VolumeError(ValueError):
    """Malformed volume file or inconsistent volume data."""


_SUPPORTED_TYPES = {"uint8": np.dtype("<u1"), "uint16": np.dtype("<u2")}
_HEADER_KEYS = ("DIMS", "SPACING", "ORIGIN", "TYPE", "DATA_OFFSET")


@dataclass
class LabeledVolume:
    """Segmented multi-label image on a regular anisotropic grid.

    The index -> physical map is affine: ``p(i,j,k) = origin + (i*sx, j*sy, k*sz)``.
    Voxels outside the grid are treated as background everywhere in the package.
    """

    labels: np.ndarray  # (nx, ny, nz), unsigned int, 0 = background
    spacing: np.ndarray  # (3,) mm
    origin: np.ndarray  # (3,) mm, center of voxel (0, 0, 0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise VolumeError("labels must be a 3D array")
        if self.labels.dtype.kind != "u":
            raise VolumeError("labels must be an unsigned integer array")
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.spacing.shape != (3,) or self.origin.shape != (3,):
            raise VolumeError("spacing and origin must be length-3")
        if np.any(np.asarray(self.labels.shape) < 1):
            raise VolumeError("dims must be >= 1 on each axis")
        if np.any(self.spacing <= 0):
            raise VolumeError("spacing must be > 0 on each axis")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def labels_present(self) -> np.ndarray:
        """Sorted array of every label value appearing in the volume."""
        return np.unique(self.labels)

    def materials(self) -> np.ndarray:
        """Sorted array of non-background labels."""
        present = self.labels_present()
        return present[present != 0]

    def index_to_physical(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.float64)
        return self.origin + ijk * self.spacing

    def physical_to_index(self, points) -> np.ndarray:
        """Continuous index coordinates of physical points (mm)."""
        points = np.asarray(points, dtype=np.float64)
        return (points - self.origin) / self.spacing

    def label_at(self, points) -> np.ndarray:
        """Label of the voxel containing each physical point; 0 outside the grid."""
        x = self.physical_to_index(np.atleast_2d(points))
        idx = np.rint(x).astype(np.int64)
        dims = np.asarray(self.dims)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        out = np.zeros(len(idx), dtype=np.int64)
        ii = idx[inside]
        out[inside] = self.labels[ii[:, 0], ii[:, 1], ii[:, 2]]
        return out

    def physical_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Extent of the voxel grid including the half-voxel border, in mm."""
        lo = self.origin - 0.5 * self.spacing
        hi = self.origin + (np.asarray(self.dims) - 0.5) * self.spacing
        return lo, hi

    def with_labels(self, labels: np.ndarray) -> "LabeledVolume":
        return LabeledVolume(labels, self.spacing.copy(), self.origin.copy())


@dataclass
class DistanceField:
    """Signed Euclidean distance to the boundary voxels of one material.

    Positive strictly inside the material, negative outside, exactly zero on
    boundary voxels (material voxels with at least one 6-neighbor of a
    different label; the grid border counts as background).  Distances are in
    mm and respect anisotropic spacing, measured between voxel centers.
    """

    material: int
    values: np.ndarray  # (nx, ny, nz) float64, mm
    spacing: np.ndarray
    origin: np.ndarray

    @property
    def dims(self):
        return self.values.shape

    def sample(self, points) -> np.ndarray:
        """Trilinear interpolation at physical points.

        Points beyond the grid get the clamped-edge value minus the physical
        distance to the grid, which keeps the sign field monotone outward.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        x = (points - self.origin) / self.spacing
        dims = np.asarray(self.dims)
        xc = np.clip(x, 0.0, dims - 1.0)
        i0 = np.floor(xc).astype(np.int64)
        i0 = np.minimum(i0, dims - 2)
        i0 = np.maximum(i0, 0)
        f = xc - i0
        v = self.values
        ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        c = np.zeros(len(points))
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            for dy in (0, 1):
                wy = fy if dy else 1.0 - fy
                for dz in (0, 1):
                    wz = fz if dz else 1.0 - fz
                    c += wx * wy * wz * v[ix + dx, iy + dy, iz + dz]
        excess = np.linalg.norm((x - xc) * self.spacing, axis=1)
        return c - excess


def boundary_voxels(vol: LabeledVolume, material: int) -> np.ndarray:
    """Boolean mask of material voxels with a 6-neighbor of a different label.

    The grid border is background, so material voxels on the edge of the grid
    are boundary voxels.
    """
    mask = vol.labels == material
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def compute_edt(vol: LabeledVolume, material: int) -> DistanceField:
    """Exact signed Euclidean distance field for one material.

    The magnitude at each voxel is the physical distance from its center to
    the nearest boundary voxel center; the sign is positive inside the
    material and negative outside.
    """
    if material not in vol.labels_present():
        raise VolumeError(f"material {material} absent from volume")
    mask = vol.labels == material
    boundary = boundary_voxels(vol, material)
    dist = ndimage.distance_transform_edt(~boundary, sampling=vol.spacing)
    sign = np.where(mask, 1.0, -1.0)
    return DistanceField(
        material=int(material),
        values=dist * sign,
        spacing=vol.spacing.copy(),
        origin=vol.origin.copy(),
    )


def compute_all_edts(vol: LabeledVolume, threads: int = 1) -> dict[int, DistanceField]:
    """One field per material.  Fields are independent, so they may be
    computed concurrently; results merge in material order regardless."""
    mats = [int(m) for m in vol.materials()]
    if threads > 1 and len(mats) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            fields = list(pool.map(lambda m: compute_edt(vol, m), mats))
        return dict(zip(mats, fields))
    return {m: compute_edt(vol, m) for m in mats}


# ---------------------------------------------------------------------------
# Synthetic phantoms (stand-ins for clinical segmentations)

PHANTOM_KINDS = ("sphere", "two-spheres", "cube-with-inclusion", "thin-tube")


def generate_phantom(kind: str, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                     **params) -> LabeledVolume:
    """Deterministic analytic phantom volumes.

    kind:
      sphere               - ball of ``radius`` voxels at ``center``, label 1
      two-spheres          - two balls (``centers``, ``radii``, ``labels``);
                             defaults place them a diagonal step apart so the
                             volume contains vertex-connected label voxels
      cube-with-inclusion  - axis-aligned cube of label 1 with an optional
                             centered cubic inclusion of label 2
                             (``inclusion_half=0`` gives a solid cube)
      thin-tube            - cylinder of ``radius`` voxels along the full z
                             axis, label 1 (small-feature analogue)

    Geometric parameters are in voxel (index) units.
    """
    dims = tuple(int(d) for d in dims)
    labels = np.zeros(dims, dtype=np.uint8)
    nx, ny, nz = dims
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")

    def check_inside(lo, hi):
        if np.any(np.asarray(lo) < 0) or np.any(np.asarray(hi) > np.asarray(dims)):
            raise VolumeError(f"{kind} phantom exceeds grid bounds")

    if kind == "sphere":
        center = params.pop("center", tuple((d - 1) / 2.0 for d in dims))
        radius = float(params.pop("radius", min(dims) * 0.3))
        check_inside([c - radius for c in center], [c + radius + 1 for c in center])
        r2 = (ii - center[0]) ** 2 + (jj - center[1]) ** 2 + (kk - center[2]) ** 2
        labels[r2 <= radius**2] = params.pop("label", 1)
    elif kind == "two-spheres":
        base = tuple(d // 3 for d in dims)
        centers = params.pop("centers", (base, tuple(b + 3 for b in base)))
        radii = params.pop("radii", (1.8, 1.8))
        labs = params.pop("labels", (1, 1))
        for c, r, lab in zip(centers, radii, labs):
            check_inside([ci - r for ci in c], [ci + r + 1 for ci in c])
            r2 = (ii - c[0]) ** 2 + (jj - c[1]) ** 2 + (kk - c[2]) ** 2
            labels[r2 <= r**2] = lab
    elif kind == "cube-with-inclusion":
        margin = int(params.pop("margin", max(2, min(dims) // 8)))
        half = params.pop("inclusion_half", max(1, min(dims) // 8))
        check_inside((margin,) * 3, tuple(d - margin for d in dims))
        sl = tuple(slice(margin, d - margin) for d in dims)
        labels[sl] = 1
        if half > 0:
            c = tuple(d // 2 for d in dims)
            sl2 = tuple(slice(ci - half, ci + half) for ci in c)
            labels[sl2] = 2
    elif kind == "thin-tube":
        radius = float(params.pop("radius", 1.5))
        cx = params.pop("center", ((nx - 1) / 2.0, (ny - 1) / 2.0))
        check_inside((cx[0] - radius, cx[1] - radius, 0),
                     (cx[0] + radius + 1, cx[1] + radius + 1, nz))
        r2 = (ii - cx[0]) ** 2 + (jj - cx[1]) ** 2
        labels[r2 <= radius**2] = params.pop("label", 1)
    else:
        raise VolumeError(f"unknown phantom kind {kind!r}")
    if params:
        raise VolumeError(f"unused phantom parameters: {sorted(params)}")
    return LabeledVolume(labels, np.asarray(spacing, float), np.asarray(origin, float))


# ---------------------------------------------------------------------------
# File format: text header (key: value lines) + raw little-endian buffer

def write_volume(vol: LabeledVolume, path) -> None:
    dtype = vol.labels.dtype
    if dtype.itemsize == 1:
        tname = "uint8"
    elif dtype.itemsize == 2:
        tname = "uint16"
    else:
        raise VolumeError("only uint8/uint16 volumes are serializable")
    lines = [
        "DIMS: %d %d %d" % vol.dims,
        "SPACING: %.17g %.17g %.17g" % tuple(vol.spacing),
        "ORIGIN: %.17g %.17g %.17g" % tuple(vol.origin),
        "TYPE: %s" % tname,
    ]
    # DATA_OFFSET counts from the start of the file; fixed-width so the
    # header length does not depend on its own value
    base = "\n".join(lines) + "\nDATA_OFFSET: %8d\n"
    offset = len(base % 0)
    with open(path, "wb") as fh:
        fh.write((base % offset).encode("ascii"))
        fh.write(np.ascontiguousarray(vol.labels, dtype=_SUPPORTED_TYPES[tname])
                 .tobytes(order="F"))


def read_volume(path) -> LabeledVolume:
    with open(path, "rb") as fh:
        raw = fh.read()
    header = {}
    pos = 0
    while len(header) < len(_HEADER_KEYS):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise VolumeError("malformed header: missing keys")
        try:
            line = raw[pos:end].decode("ascii")
        except UnicodeDecodeError as exc:
            raise VolumeError("malformed header: non-ASCII bytes") from exc
        pos = end + 1
        if ":" not in line:
            raise VolumeError(f"malformed header line {line!r}")
        key, _, value = line.partition(":")
        key = key.strip()
        if key not in _HEADER_KEYS:
            raise VolumeError(f"malformed header: unknown key {key!r}")
        header[key] = value.strip()
    try:
        dims = tuple(int(t) for t in header["DIMS"].split())
        spacing = [float(t) for t in header["SPACING"].split()]
        origin = [float(t) for t in header["ORIGIN"].split()]
        offset = int(header["DATA_OFFSET"])
    except ValueError as exc:
        raise VolumeError(f"malformed header: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise VolumeError("malformed header: DIMS/SPACING/ORIGIN must be length-3")
    tname = header["TYPE"]
    if tname not in _SUPPORTED_TYPES:
        raise VolumeError(f"unsupported scalar type {tname!r}")
    dtype = _SUPPORTED_TYPES[tname]
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    buf = raw[offset:]
    if len(buf) != expected:
        raise VolumeError(
            f"buffer length mismatch: got {len(buf)} bytes, expected {expected}")
    labels = np.frombuffer(buf, dtype=dtype).reshape(dims, order="F")
    return LabeledVolume(labels.copy(), spacing, origin)
