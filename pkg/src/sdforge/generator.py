"""Random block-union geometry generator.

Each object is the union (pointwise min) of ``n`` randomly sized, placed and
rotated boxes, rasterized as an exact SDF on a cell-centred grid and then
rounded by ``rounds`` passes of a normalized Gaussian blur of width ``sigma``.

Randomness comes from numpy's PCG64 bit generator, one stream per object,
seeded with the object seed (``seed ^ retry`` when a draw has to be redone).
PCG64 output is specified bit-for-bit, so datasets are reproducible across
platforms.

The default sampling ranges are this package's own choices and are
documented on :class:`GenConfig`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ParameterError
from .sdf import SdfGrid, blur, centered_grid, make_kernel, write_grid

MANIFEST_SCHEMA = 1
MAX_RETRIES = 8


@dataclass(frozen=True)
class BlockSpec:
    """Oriented box: side lengths ``size``, centre ``center``, Euler angles ``rotation``.

    The rotation is ``Rz(θz) @ Ry(θy) @ Rx(θx)`` mapping block-local
    coordinates to world coordinates.
    """

    size: tuple[float, float, float]
    center: tuple[float, float, float]
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if any(not s > 0 for s in self.size):
            raise ParameterError(f"block sides must be positive, got {self.size}")

    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.rotation)

    @property
    def bounding_radius(self) -> float:
        return 0.5 * math.sqrt(sum(s * s for s in self.size))

    def to_dict(self) -> dict:
        return {"size": list(self.size), "center": list(self.center), "rotation": list(self.rotation)}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        return cls(tuple(d["size"]), tuple(d["center"]), tuple(d["rotation"]))


def rotation_matrix(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def block_sdf(block: BlockSpec, p) -> np.ndarray | float:
    """Exact signed distance from ``p`` (``(..., 3)``) to the oriented box."""
    p = np.asarray(p, dtype=np.float64)
    local = (p - np.asarray(block.center)) @ block.matrix()  # R^T (p - c)
    q = np.abs(local) - 0.5 * np.asarray(block.size)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    out = outside + inside
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GenConfig:
    """Generator settings.

    Defaults (not taken from any published value): 2-8 blocks, block sides
    between 0.15 and 0.6 of ``world_extent``, blur sigma in [0.5, 2.0]
    voxels and 0-4 blur rounds.  Blocks are confined to a ball of radius
    ``world_extent / 2 - pos_margin - ceil(3 * sigma_max) * spacing``; a
    block whose bounding sphere does not fit in that ball is scaled down
    until it does.
    """

    seed: int = 0
    n_range: tuple[int, int] = (2, 8)
    size_range: tuple[float, float] = (0.15, 0.6)
    pos_margin: float = 0.1
    sigma_range: tuple[float, float] = (0.5, 2.0)
    rounds_range: tuple[int, int] = (0, 4)
    grid_dims: int = 64
    world_extent: float = 2.0

    def __post_init__(self) -> None:
        lo, hi = self.n_range
        if not 1 <= lo <= hi:
            raise ParameterError(f"n_range must satisfy 1 <= lo <= hi, got {self.n_range}")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ParameterError(f"size_range must satisfy 0 < lo <= hi, got {self.size_range}")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ParameterError(f"sigma_range must satisfy 0 < lo <= hi, got {self.sigma_range}")
        lo, hi = self.rounds_range
        if not 0 <= lo <= hi:
            raise ParameterError(f"rounds_range must satisfy 0 <= lo <= hi, got {self.rounds_range}")
        if self.grid_dims < 8:
            raise ParameterError(f"grid_dims must be >= 8, got {self.grid_dims}")
        if not self.world_extent > 0 or self.pos_margin < 0:
            raise ParameterError("world_extent must be positive and pos_margin non-negative")
        if self.object_radius <= 0.05 * self.world_extent:
            raise ParameterError("pos_margin and blur support leave no room for blocks")

    @property
    def spacing(self) -> float:
        return self.world_extent / self.grid_dims

    @property
    def object_radius(self) -> float:
        """Radius of the ball every block is confined to."""
        support = math.ceil(3.0 * self.sigma_range[1]) * self.spacing
        return 0.5 * self.world_extent - self.pos_margin - support

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown GenConfig keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


class Generated(NamedTuple):
    grid: SdfGrid
    blocks: list[BlockSpec]
    sigma: float
    rounds: int
    seed: int


def _sample_block(rng: np.random.Generator, cfg: GenConfig) -> BlockSpec:
    size = rng.uniform(*cfg.size_range, size=3) * cfg.world_extent
    rot = rng.uniform(0.0, 2.0 * math.pi, size=3)
    direction = rng.normal(size=3)
    u = rng.uniform()
    r_obj = cfg.object_radius
    r_b = 0.5 * float(np.linalg.norm(size))
    if r_b > r_obj:
        size = size * (r_obj / r_b)
        r_b = r_obj
    direction /= max(np.linalg.norm(direction), 1e-12)
    center = direction * (r_obj - r_b) * u ** (1.0 / 3.0)
    return BlockSpec(tuple(float(s) for s in size), tuple(float(c) for c in center), tuple(float(a) for a in rot))


def rasterize_union(blocks, cfg: GenConfig) -> SdfGrid:
    """Pre-blur field: min over blocks of the exact box SDF at voxel centres."""
    g = centered_grid(cfg.grid_dims, cfg.world_extent)
    pts = g.centers()
    vals = np.full(g.dims, np.inf)
    for b in blocks:
        vals = np.minimum(vals, block_sdf(b, pts))
    return g.with_values(vals)


def generate_from_blocks(blocks, sigma: float, rounds: int, cfg: GenConfig) -> SdfGrid:
    """Regenerate a grid from recorded metadata (replay path of :func:`generate`)."""
    return blur(rasterize_union(blocks, cfg), make_kernel(sigma), rounds)


def _draw(seed: int, cfg: GenConfig) -> Generated:
    rng = np.random.Generator(np.random.PCG64(seed))
    n = int(rng.integers(cfg.n_range[0], cfg.n_range[1] + 1))
    sigma = float(rng.uniform(*cfg.sigma_range))
    rounds = int(rng.integers(cfg.rounds_range[0], cfg.rounds_range[1] + 1))
    blocks = [_sample_block(rng, cfg) for _ in range(n)]
    grid = generate_from_blocks(blocks, sigma, rounds, cfg)
    return Generated(grid, blocks, sigma, rounds, seed)


def is_degenerate(grid: SdfGrid) -> bool:
    v = grid.values
    return not (np.any(v < 0) and np.any(v > 0))


def generate(cfg: GenConfig) -> Generated:
    """Draw one object; single-sign results are redrawn with ``seed ^ retry``."""
    for retry in range(MAX_RETRIES + 1):
        out = _draw(cfg.seed ^ retry, cfg)
        if not is_degenerate(out.grid):
            return out
    raise ParameterError(f"seed {cfg.seed}: degenerate geometry after {MAX_RETRIES} retries")


def occupancy_fraction(grid: SdfGrid) -> float:
    return float(np.mean(grid.values < 0))


def generate_dataset(cfg: GenConfig, count: int, out_dir) -> dict:
    """Write ``count`` grids seeded ``cfg.seed + i`` plus ``manifest.json``."""
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    entries = []
    for i in range(count):
        obj = generate(_with_seed(cfg, cfg.seed + i))
        name = f"obj_{i:05d}.sdfg"
        path = out / name
        try:
            write_grid(obj.grid, path)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        entries.append(
            {
                "file": name,
                "seed": cfg.seed + i,
                "draw_seed": obj.seed,
                "n": len(obj.blocks),
                "sigma": obj.sigma,
                "rounds": obj.rounds,
                "occupancy": occupancy_fraction(obj.grid),
                "blocks": [b.to_dict() for b in obj.blocks],
            }
        )
    manifest = {"schema": MANIFEST_SCHEMA, "config": cfg.to_dict(), "entries": entries}
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return manifest


def _with_seed(cfg: GenConfig, seed: int) -> GenConfig:
    d = cfg.to_dict()
    d["seed"] = seed
    return GenConfig.from_dict(d)
