"""Dense signed-distance grids, trilinear sampling and normalized Gaussian blur.

Grids are cell-centred: ``origin`` is the world position of voxel ``(0, 0, 0)``
and voxel ``(i, j, k)`` sits at ``origin + spacing * (i, j, k)``.  Values are
held in a ``(nx, ny, nz)`` float64 array indexed ``[x, y, z]``; the binary file
format stores them x-fastest (Fortran order).

Queries outside the lattice clamp the query position to the outermost voxel
centres, so out-of-bounds samples return border values.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, ParameterError

SDFG_MAGIC = b"SDFG"
SDFG_VERSION = 1
_SDFG_HEADER = struct.Struct("<4sH3I3dd")


@dataclass(frozen=True, eq=False)
class SdfGrid:
    values: np.ndarray
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    spacing: float = 1.0

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 3 or min(vals.shape) < 2:
            raise ParameterError(f"grid dims must be three values >= 2, got {vals.shape}")
        if not self.spacing > 0:
            raise ParameterError(f"spacing must be positive, got {self.spacing}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    @property
    def upper(self) -> np.ndarray:
        """World position of the last voxel centre."""
        return np.asarray(self.origin) + self.spacing * (np.asarray(self.dims) - 1)

    def with_values(self, values: np.ndarray) -> "SdfGrid":
        return SdfGrid(values, self.origin, self.spacing)

    def same_lattice(self, other: "SdfGrid") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-12)
            and abs(self.spacing - other.spacing) <= 1e-12
        )

    def centers(self) -> np.ndarray:
        """World coordinates of all voxel centres, shape ``(nx, ny, nz, 3)``."""
        axes = [self.origin[a] + self.spacing * np.arange(n) for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_index(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - np.asarray(self.origin)) / self.spacing


def centered_grid(dims: int | tuple[int, int, int], extent: float, values=None) -> SdfGrid:
    """A grid whose cells tile the cube ``[-extent/2, extent/2]^3``."""
    if isinstance(dims, int):
        dims = (dims, dims, dims)
    h = extent / dims[0]
    origin = tuple(-extent / 2 + h / 2 for _ in range(3))
    if values is None:
        values = np.zeros(dims)
    return SdfGrid(values, origin, h)


def grid_from_function(fn, dims, extent: float) -> SdfGrid:
    """Rasterize ``fn(points[..., 3]) -> values`` at the voxel centres."""
    g = centered_grid(dims, extent)
    return g.with_values(fn(g.centers()))


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def _trilinear_index(values: np.ndarray, u: np.ndarray) -> np.ndarray:
    dims = np.asarray(values.shape)
    u = np.clip(u, 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), dims - 2)
    f = u - i0
    out = np.zeros(u.shape[:-1])
    for dx in (0, 1):
        wx = f[..., 0] if dx else 1.0 - f[..., 0]
        for dy in (0, 1):
            wy = f[..., 1] if dy else 1.0 - f[..., 1]
            for dz in (0, 1):
                wz = f[..., 2] if dz else 1.0 - f[..., 2]
                out = out + wx * wy * wz * values[i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz]
    return out


def sample_trilinear(grid: SdfGrid, p) -> np.ndarray | float:
    """Trilinearly interpolate ``grid`` at world points ``p`` (shape ``(..., 3)``)."""
    p = np.asarray(p, dtype=np.float64)
    u = grid.to_index(p)
    # snap round-off so that queries at voxel centres return the stored value exactly
    r = np.rint(u)
    u = np.where(np.abs(u - r) < 1e-9, r, u)
    out = _trilinear_index(grid.values, u)
    return float(out) if out.ndim == 0 else out


def gradient_central(grid: SdfGrid, p) -> np.ndarray:
    """Central-difference gradient of the interpolated field, step = spacing.

    Where ``p +/- spacing`` would leave the lattice along an axis the stencil
    collapses to a one-sided difference on that axis.
    """
    p = np.asarray(p, dtype=np.float64)
    u = np.clip(grid.to_index(p), 0.0, np.asarray(grid.dims) - 1.0)
    g = np.empty(u.shape)
    for a in range(3):
        hi = np.minimum(u[..., a] + 1.0, grid.dims[a] - 1.0)
        lo = np.maximum(u[..., a] - 1.0, 0.0)
        up = u.copy()
        um = u.copy()
        up[..., a] = hi
        um[..., a] = lo
        fp = _trilinear_index(grid.values, up)
        fm = _trilinear_index(grid.values, um)
        g[..., a] = (fp - fm) / ((hi - lo) * grid.spacing)
    return g


# --------------------------------------------------------------------------
# Gaussian kernel and blur
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianKernel:
    """Normalized isotropic Gaussian on the cube ``[-radius, radius]^3`` (voxel units).

    ``weights[r + ox, r + oy, r + oz]`` is the weight of offset ``(ox, oy, oz)``.
    The kernel is separable: ``weights`` equals the outer product of ``axis``
    with itself three times.
    """

    sigma: float
    radius: int
    weights: np.ndarray = field(repr=False)
    axis: np.ndarray = field(repr=False)

    def weight(self, offset) -> float:
        r = self.radius
        return float(self.weights[offset[0] + r, offset[1] + r, offset[2] + r])


def make_kernel(sigma: float) -> GaussianKernel:
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    o = np.arange(-radius, radius + 1, dtype=np.float64)
    g1 = np.exp(-(o**2) / (2.0 * sigma**2))
    axis = g1 / g1.sum()
    d2 = o[:, None, None] ** 2 + o[None, :, None] ** 2 + o[None, None, :] ** 2
    g3 = np.exp(-d2 / (2.0 * sigma**2))
    weights = g3 / g3.sum()
    for arr in (axis, weights):
        arr.setflags(write=False)
    return GaussianKernel(float(sigma), radius, weights, axis)


def blur_array(values: np.ndarray, kernel: GaussianKernel, rounds: int) -> np.ndarray:
    """Apply the normalized kernel ``rounds`` times with clamp-to-border sampling."""
    out = np.asarray(values, dtype=np.float64)
    for _ in range(rounds):
        for ax in range(out.ndim):
            out = ndimage.correlate1d(out, kernel.axis, axis=ax, mode="nearest")
    return out


def blur(grid: SdfGrid, kernel: GaussianKernel, rounds: int) -> SdfGrid:
    if rounds < 0:
        raise ParameterError(f"rounds must be >= 0, got {rounds}")
    if rounds == 0:
        return grid
    return grid.with_values(blur_array(grid.values, kernel, rounds))


# --------------------------------------------------------------------------
# binary I/O
# --------------------------------------------------------------------------

def grid_to_bytes(grid: SdfGrid) -> bytes:
    head = _SDFG_HEADER.pack(SDFG_MAGIC, SDFG_VERSION, *grid.dims, *grid.origin, grid.spacing)
    body = np.asarray(grid.values, dtype="<f4").ravel(order="F").tobytes()
    return head + body


def grid_from_bytes(data: bytes) -> SdfGrid:
    if len(data) < _SDFG_HEADER.size:
        raise FormatError("truncated SDFG header")
    magic, version, nx, ny, nz, ox, oy, oz, h = _SDFG_HEADER.unpack_from(data)
    if magic != SDFG_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {SDFG_MAGIC!r}")
    if version != SDFG_VERSION:
        raise FormatError(f"unsupported SDFG version {version}")
    n = nx * ny * nz
    body = data[_SDFG_HEADER.size:]
    if len(body) != 4 * n:
        raise FormatError(f"expected {4 * n} value bytes, found {len(body)}")
    vals = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape((nx, ny, nz), order="F")
    return SdfGrid(vals, (ox, oy, oz), h)


def write_grid(grid: SdfGrid, path) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def read_grid(path) -> SdfGrid:
    return grid_from_bytes(Path(path).read_bytes())
