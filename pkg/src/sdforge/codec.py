"""Fixed linear latent codec for 64^3 SDF grids.

The latent is a 16^3 lattice of coarse SDF samples (4096 numbers).  Encoding
averages each 4x4x4 block of fine voxels; decoding upsamples trilinearly from
the coarse cell centres and smooths with a normalized Gaussian.  Both maps are
separable, so each is stored as one small matrix per axis and the decoder's
adjoint is just the transposed matrices.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .sdf import SdfGrid, make_kernel

LATENT_SIDE = 16
LATF_MAGIC = b"LATF"
LATF_VERSION = 1
_LATF_HEADER = struct.Struct("<4sH3I3dd")


@dataclass(frozen=True)
class CodecConfig:
    fine_dims: int = 64
    decode_sigma: float = 1.0
    decode_rounds: int = 1

    def __post_init__(self) -> None:
        if self.fine_dims < LATENT_SIDE or self.fine_dims % LATENT_SIDE:
            raise ParameterError(f"fine_dims must be a positive multiple of {LATENT_SIDE}")
        if not self.decode_sigma > 0:
            raise ParameterError("decode_sigma must be positive")
        if self.decode_rounds < 0:
            raise ParameterError("decode_rounds must be >= 0")

    @property
    def factor(self) -> int:
        return self.fine_dims // LATENT_SIDE

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class LatentCode:
    values: np.ndarray
    origin: tuple[float, float, float]
    spacing: float

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != (LATENT_SIDE,) * 3:
            raise ParameterError(f"latent must be {LATENT_SIDE}^3, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ParameterError("latent contains non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "spacing", float(self.spacing))

    def with_values(self, values) -> "LatentCode":
        return LatentCode(values, self.origin, self.spacing)


def latent_frame(grid: SdfGrid, cfg: CodecConfig) -> tuple[tuple[float, ...], float]:
    """World origin and spacing of the coarse lattice covering ``grid``."""
    f = cfg.factor
    origin = tuple(o + 0.5 * (f - 1) * grid.spacing for o in grid.origin)
    return origin, grid.spacing * f


def zero_latent(grid_template: SdfGrid, cfg: CodecConfig) -> LatentCode:
    origin, h = latent_frame(grid_template, cfg)
    return LatentCode(np.zeros((LATENT_SIDE,) * 3), origin, h)


@lru_cache(maxsize=16)
def _axis_matrices(fine: int, sigma: float, rounds: int) -> tuple[np.ndarray, np.ndarray]:
    f = fine // LATENT_SIDE
    enc = np.zeros((LATENT_SIDE, fine))
    for c in range(LATENT_SIDE):
        enc[c, c * f:(c + 1) * f] = 1.0 / f
    up = np.zeros((fine, LATENT_SIDE))
    for i in range(fine):
        c = min(max((i + 0.5) / f - 0.5, 0.0), LATENT_SIDE - 1.0)
        c0 = min(int(np.floor(c)), LATENT_SIDE - 2)
        t = c - c0
        up[i, c0] += 1.0 - t
        up[i, c0 + 1] += t
    kern = make_kernel(sigma)
    b = np.zeros((fine, fine))
    for i in range(fine):
        for o in range(-kern.radius, kern.radius + 1):
            b[i, min(max(i + o, 0), fine - 1)] += kern.axis[o + kern.radius]
    dec = up
    for _ in range(rounds):
        dec = b @ dec
    for m in (enc, dec):
        m.setflags(write=False)
    return enc, dec


def _apply_axes(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    # x'[i,j,k] = sum_abc m[i,a] m[j,b] m[k,c] x[a,b,c]
    x = np.tensordot(m, x, axes=(1, 0))
    x = np.tensordot(m, x, axes=(1, 1)).transpose(1, 0, 2)
    x = np.tensordot(m, x, axes=(1, 2)).transpose(1, 2, 0)
    return x


def decode_matrix(cfg: CodecConfig) -> np.ndarray:
    """Per-axis decode matrix, shape ``(fine_dims, 16)``."""
    return _axis_matrices(cfg.fine_dims, cfg.decode_sigma, cfg.decode_rounds)[1]


def encode(grid: SdfGrid, cfg: CodecConfig | None = None) -> LatentCode:
    cfg = cfg or CodecConfig()
    if grid.dims != (cfg.fine_dims,) * 3:
        raise ParameterError(f"grid dims {grid.dims} do not match fine_dims {cfg.fine_dims}")
    enc, _ = _axis_matrices(cfg.fine_dims, cfg.decode_sigma, cfg.decode_rounds)
    origin, h = latent_frame(grid, cfg)
    return LatentCode(_apply_axes(enc, grid.values), origin, h)


def decode_values(phi: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    return _apply_axes(decode_matrix(cfg), np.asarray(phi, dtype=np.float64))


def decode(latent: LatentCode, cfg: CodecConfig | None = None) -> SdfGrid:
    cfg = cfg or CodecConfig()
    f = cfg.factor
    h = latent.spacing / f
    origin = tuple(o - 0.5 * (f - 1) * h for o in latent.origin)
    return SdfGrid(decode_values(latent.values, cfg), origin, h)


def decode_jacobian_apply(cotangent, cfg: CodecConfig | None = None) -> np.ndarray:
    """Transpose of the decode map applied to a fine-grid cotangent."""
    cfg = cfg or CodecConfig()
    g = cotangent.values if isinstance(cotangent, SdfGrid) else np.asarray(cotangent, dtype=np.float64)
    if g.shape != (cfg.fine_dims,) * 3:
        raise ParameterError(f"cotangent shape {g.shape} does not match fine_dims {cfg.fine_dims}")
    return _apply_axes(decode_matrix(cfg).T, g)


def reconstruct_loss(a: SdfGrid, b: SdfGrid) -> float:
    """Mean squared voxel difference."""
    if a.dims != b.dims:
        raise ParameterError(f"dimension mismatch {a.dims} vs {b.dims}")
    return float(np.mean((a.values - b.values) ** 2))


def latent_to_bytes(latent: LatentCode) -> bytes:
    head = _LATF_HEADER.pack(LATF_MAGIC, LATF_VERSION, *(LATENT_SIDE,) * 3, *latent.origin, latent.spacing)
    return head + np.asarray(latent.values, dtype="<f4").ravel(order="F").tobytes()


def latent_from_bytes(data: bytes) -> LatentCode:
    if len(data) < _LATF_HEADER.size:
        raise FormatError("truncated LATF header")
    magic, version, nx, ny, nz, ox, oy, oz, h = _LATF_HEADER.unpack_from(data)
    if magic != LATF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {LATF_MAGIC!r}")
    if version != LATF_VERSION:
        raise FormatError(f"unsupported LATF version {version}")
    if (nx, ny, nz) != (LATENT_SIDE,) * 3:
        raise FormatError(f"latent dims must be {LATENT_SIDE}^3, got {(nx, ny, nz)}")
    body = data[_LATF_HEADER.size:]
    if len(body) != 4 * LATENT_SIDE**3:
        raise FormatError("latent payload has the wrong size")
    vals = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape((nx, ny, nz), order="F")
    return LatentCode(vals, (ox, oy, oz), h)


def write_latent(latent: LatentCode, path) -> None:
    Path(path).write_bytes(latent_to_bytes(latent))


def read_latent(path) -> LatentCode:
    return latent_from_bytes(Path(path).read_bytes())
