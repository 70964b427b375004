"""Physical-space 3D volumes and binary masks.

Conventions
-----------
A ``Grid3D`` places voxel (i, j, k) at ``origin + direction @ (i*sx, j*sy, k*sz)``
with dims (nx, ny, nz), spacing in millimetres, and an orthonormal 3x3
direction matrix. Array data is stored x-fastest: a C-order numpy array of
shape ``(nz, ny, nx)`` has linear index ``i + nx*(j + ny*k)``, which is also
the on-disk order of the VF32 file format.

Volumes hold float32 scalar fields (Hounsfield units, standardized uptake
values, probabilities); masks hold {0, 1} uint8 fields on the same layout.
All types are immutable by convention: operations return new objects.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, ValidationError

__all__ = [
    "Grid3D",
    "Volume3D",
    "Mask3D",
    "grids_equal",
    "resample_linear",
    "resample_nearest_mask",
    "crop_centered",
    "flip_x",
    "voxel_volume_cc",
    "save_vf32",
    "load_vf32",
]

_GRID_ATOL = 1e-6


@dataclass(frozen=True)
class Grid3D:
    """Voxel lattice embedded in physical (mm) space."""

    dims: tuple  # (nx, ny, nz) voxel counts
    spacing: tuple  # (sx, sy, sz) mm per voxel
    origin: tuple = (0.0, 0.0, 0.0)  # mm position of voxel (0, 0, 0)
    direction: tuple = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)  # row-major 3x3

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        direction = tuple(float(d) for d in self.direction)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise GeometryError("dims, spacing and origin must have length 3")
        if len(direction) != 9:
            raise GeometryError("direction must be a row-major 3x3 matrix")
        if any(d < 1 for d in dims):
            raise GeometryError(f"all dims must be >= 1, got {dims}")
        if any(s <= 0 for s in spacing):
            raise GeometryError(f"all spacings must be > 0, got {spacing}")
        dmat = np.array(direction, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(dmat.T @ dmat - np.eye(3))) >= _GRID_ATOL:
            raise GeometryError("direction matrix is not orthonormal")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def nvoxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def direction_matrix(self) -> np.ndarray:
        return np.array(self.direction, dtype=np.float64).reshape(3, 3)

    def voxel_to_physical(self, ijk: np.ndarray) -> np.ndarray:
        """Map voxel indices (..., 3) in (i, j, k) order to mm positions."""
        ijk = np.asarray(ijk, dtype=np.float64)
        scaled = ijk * np.array(self.spacing, dtype=np.float64)
        return scaled @ self.direction_matrix.T + np.array(self.origin)

    def physical_to_voxel(self, xyz: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`voxel_to_physical`; returns fractional indices."""
        xyz = np.asarray(xyz, dtype=np.float64)
        rel = (xyz - np.array(self.origin)) @ self.direction_matrix
        return rel / np.array(self.spacing, dtype=np.float64)


def grids_equal(a: Grid3D, b: Grid3D, atol: float = _GRID_ATOL) -> bool:
    """True when dims match and spacing/origin/direction agree within atol."""
    if a.dims != b.dims:
        return False
    for fa, fb in ((a.spacing, b.spacing), (a.origin, b.origin), (a.direction, b.direction)):
        if np.max(np.abs(np.subtract(fa, fb))) > atol:
            return False
    return True


def _require_same_grid(a, b, what: str):
    if not grids_equal(a.grid, b.grid):
        raise GeometryError(f"{what}: grids differ")


@dataclass(frozen=True)
class Volume3D:
    """Scalar field on a grid; ``data`` has shape (nz, ny, nx), float32."""

    grid: Grid3D
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        nx, ny, nz = self.grid.dims
        arr = np.asarray(self.data)
        if arr.shape != (nz, ny, nx):
            raise GeometryError(f"data shape {arr.shape} does not match dims {self.grid.dims}")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("volume contains NaN or Inf")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def flat(self) -> np.ndarray:
        """Values in linear order i + nx*(j + ny*k)."""
        return self.data.reshape(-1)


@dataclass(frozen=True)
class Mask3D:
    """Binary field on a grid; ``data`` has shape (nz, ny, nx), uint8 {0, 1}."""

    grid: Grid3D
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        nx, ny, nz = self.grid.dims
        arr = np.asarray(self.data)
        if arr.shape != (nz, ny, nx):
            raise GeometryError(f"data shape {arr.shape} does not match dims {self.grid.dims}")
        if arr.dtype != np.uint8:
            if not np.all(np.isin(arr, (0, 1))):
                raise ValidationError("mask values must be 0 or 1")
            arr = arr.astype(np.uint8)
        elif arr.max(initial=0) > 1:
            raise ValidationError("mask values must be 0 or 1")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def count(self) -> int:
        """Number of foreground voxels."""
        return int(self.data.sum(dtype=np.int64))


def voxel_volume_cc(grid: Grid3D) -> float:
    """Physical volume of one voxel in cubic centimetres."""
    sx, sy, sz = grid.spacing
    return sx * sy * sz / 1000.0


def _source_coordinates(src_grid: Grid3D, target: Grid3D) -> np.ndarray:
    """Fractional source indices of every target voxel centre.

    Returns an array of shape (nz, ny, nx, 3) in (i, j, k) order. Values are
    snapped to the nearest integer when within 1e-9, so resampling onto an
    identical grid reproduces the input bitwise.
    """
    nx, ny, nz = target.dims
    kk, jj, ii = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    ijk = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
    phys = target.voxel_to_physical(ijk.reshape(-1, 3))
    u = src_grid.physical_to_voxel(phys).reshape(nz, ny, nx, 3)
    nearest = np.round(u)
    snap = np.abs(u - nearest) < 1e-9
    u[snap] = nearest[snap]
    return u


def resample_linear(src: Volume3D, target: Grid3D, fill: float) -> Volume3D:
    """Trilinear resample of ``src`` onto ``target``; outside voxels take ``fill``.

    The interpolation domain is the box spanned by source voxel centres,
    [0, n-1] per axis in index space.
    """
    u = _source_coordinates(src.grid, target)
    nx, ny, nz = src.grid.dims
    n = np.array([nx, ny, nz], dtype=np.float64)
    inside = np.all((u >= 0.0) & (u <= n - 1.0), axis=-1)

    uc = np.clip(u, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(uc), np.maximum(n - 2.0, 0.0)).astype(np.int64)
    frac = uc - i0
    i1 = np.minimum(i0 + 1, (n - 1).astype(np.int64))

    data = src.data.astype(np.float64)
    ix0, jy0, kz0 = i0[..., 0], i0[..., 1], i0[..., 2]
    ix1, jy1, kz1 = i1[..., 0], i1[..., 1], i1[..., 2]
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]

    def g(kz, jy, ix):
        return data[kz, jy, ix]

    c000 = g(kz0, jy0, ix0)
    c100 = g(kz0, jy0, ix1)
    c010 = g(kz0, jy1, ix0)
    c110 = g(kz0, jy1, ix1)
    c001 = g(kz1, jy0, ix0)
    c101 = g(kz1, jy0, ix1)
    c011 = g(kz1, jy1, ix0)
    c111 = g(kz1, jy1, ix1)

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz

    out = np.where(inside, out, np.float64(fill)).astype(np.float32)
    # Bitwise identity on exact hits: trilinear weights of 0/1 already give the
    # corner value, but float32->float64->float32 round-trips are exact, so no
    # special case is needed beyond coordinate snapping.
    return Volume3D(target, out)


def resample_nearest_mask(src: Mask3D, target: Grid3D) -> Mask3D:
    """Nearest-neighbour resample of a mask; outside the source extent -> 0."""
    u = _source_coordinates(src.grid, target)
    nx, ny, nz = src.grid.dims
    n = np.array([nx, ny, nz], dtype=np.float64)
    nearest = np.floor(u + 0.5).astype(np.int64)
    inside = np.all((nearest >= 0) & (nearest <= (n - 1).astype(np.int64)), axis=-1)
    nc = np.clip(nearest, 0, (n - 1).astype(np.int64))
    vals = src.data[nc[..., 2], nc[..., 1], nc[..., 0]]
    out = np.where(inside, vals, np.uint8(0))
    return Mask3D(target, out)


def _crop_array(data: np.ndarray, center, out_dims, fill):
    """Crop/pad ``data`` (z, y, x layout) about ``center`` (i, j, k order)."""
    cx, cy, cz = (int(d) for d in out_dims)
    if min(cx, cy, cz) < 1:
        raise ValidationError(f"crop dims must be >= 1, got {out_dims}")
    ci, cj, ck = (int(c) for c in center)
    start = (ci - cx // 2, cj - cy // 2, ck - cz // 2)  # (i, j, k)
    out = np.full((cz, cy, cx), fill, dtype=data.dtype)
    nz, ny, nx = data.shape
    src_lo = [max(0, s) for s in (start[2], start[1], start[0])]  # (k, j, i)
    src_hi = [min(n, s + c) for n, s, c in zip((nz, ny, nx), (start[2], start[1], start[0]), (cz, cy, cx))]
    if all(lo < hi for lo, hi in zip(src_lo, src_hi)):
        dst_lo = [lo - s for lo, s in zip(src_lo, (start[2], start[1], start[0]))]
        dst_hi = [hi - s for hi, s in zip(src_hi, (start[2], start[1], start[0]))]
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
            data[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    return out, start


def crop_start(center, out_dims) -> tuple:
    """Voxel index (i, j, k) of the crop box corner for the given center."""
    cx, cy, cz = (int(d) for d in out_dims)
    ci, cj, ck = (int(c) for c in center)
    return (ci - cx // 2, cj - cy // 2, ck - cz // 2)


def _shifted_grid(grid: Grid3D, start, out_dims) -> Grid3D:
    shift = grid.voxel_to_physical(np.array(start, dtype=np.float64)) - np.array(grid.origin)
    new_origin = tuple(np.array(grid.origin) + shift)
    return Grid3D(tuple(int(d) for d in out_dims), grid.spacing, new_origin, grid.direction)


def crop_centered(vol, center, out_dims, fill=0.0):
    """Crop a Volume3D or Mask3D so ``center`` maps to the output box centre.

    The output grid keeps spacing and direction; its origin is shifted so
    every copied voxel keeps its physical position. ``center`` lands on
    output voxel (cx//2, cy//2, cz//2). Out-of-bounds regions take ``fill``.
    """
    if isinstance(vol, Mask3D):
        fill_val = np.uint8(int(fill))
        out, start = _crop_array(vol.data, center, out_dims, fill_val)
        return Mask3D(_shifted_grid(vol.grid, start, out_dims), out)
    out, start = _crop_array(vol.data, center, out_dims, np.float32(fill))
    return Volume3D(_shifted_grid(vol.grid, start, out_dims), out)


def flip_x(vol):
    """Mirror along the x axis in index space; the grid is left unchanged."""
    flipped = vol.data[:, :, ::-1]
    if isinstance(vol, Mask3D):
        return Mask3D(vol.grid, flipped.copy())
    return Volume3D(vol.grid, flipped.copy())


# ---------------------------------------------------------------------------
# VF32 file format: <name>.vf32 raw little-endian float32 in linear order
# i + nx*(j + ny*k), with a <name>.json sidecar describing the grid.
# ---------------------------------------------------------------------------

_KINDS = ("ct", "pet", "mask", "prob")


def save_vf32(path: str, obj, kind: str) -> None:
    """Write a Volume3D or Mask3D as a raw .vf32 file plus .json sidecar.

    Masks are stored as 0.0/1.0 floats for format uniformity. ``path`` may
    be given with or without the .vf32 extension.
    """
    if kind not in _KINDS:
        raise ValidationError(f"kind must be one of {_KINDS}, got {kind!r}")
    base = path[:-5] if path.endswith(".vf32") else path
    data = obj.data.astype("<f4")
    data.reshape(-1).tofile(base + ".vf32")
    sidecar = {
        "dims": list(obj.grid.dims),
        "spacing_mm": list(obj.grid.spacing),
        "origin_mm": list(obj.grid.origin),
        "direction": list(obj.grid.direction),
        "kind": kind,
    }
    with open(base + ".json", "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
        f.write("\n")


def load_vf32(path: str):
    """Load a .vf32 file; returns Volume3D, or Mask3D when kind == 'mask'."""
    base = path[:-5] if path.endswith(".vf32") else path
    if not os.path.exists(base + ".vf32") or not os.path.exists(base + ".json"):
        raise IOError(f"missing VF32 file or sidecar for {base!r}")
    with open(base + ".json") as f:
        meta = json.load(f)
    grid = Grid3D(
        tuple(meta["dims"]),
        tuple(meta["spacing_mm"]),
        tuple(meta["origin_mm"]),
        tuple(meta["direction"]),
    )
    nx, ny, nz = grid.dims
    raw = np.fromfile(base + ".vf32", dtype="<f4")
    if raw.size != grid.nvoxels:
        raise IOError(f"{base}.vf32 holds {raw.size} values, expected {grid.nvoxels}")
    arr = raw.reshape(nz, ny, nx)
    if meta["kind"] == "mask":
        if not np.all(np.isin(arr, (0.0, 1.0))):
            raise ValidationError(f"{base}.vf32 declared as mask but has non-binary values")
        return Mask3D(grid, arr.astype(np.uint8))
    return Volume3D(grid, arr)
