"""Global 3D texture grid baked from multi-view colour images.

Every visible surface point of the mesh (one per covered pixel, hard z-buffer
visibility) reads its colour from the texture by trilinear interpolation.
Baking minimizes the view-aware squared error

    sum_obs w_obs * |T(p_obs) - C_obs|^2 / sum_obs w_obs
      + reg * mean over neighbouring voxel pairs of |T_i - T_j|^2

where ``w = max(cos(v, n), 0)^k`` with ``v`` pointing from the surface to the
camera and ``n`` the outward face normal.  The data term only touches the
eight-voxel stencils of observed points; the smoothness term fills in voxels
that no view sees.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import FormatError, ParameterError
from .mesh import TriMesh, face_normals
from .raster import rasterize_mesh

TEXG_MAGIC = b"TEXG"
TEXG_VERSION = 1
_TEXG_HEADER = struct.Struct("<4sH3I3dd")
MIN_STEP = 1e-4


@dataclass(frozen=True, eq=False)
class TextureGrid:
    """RGB values ``(nx, ny, nz, 3)`` at voxel centres ``origin + spacing * index``."""

    values: np.ndarray
    origin: tuple[float, float, float]
    spacing: float

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 4 or v.shape[3] != 3 or min(v.shape[:3]) < 8:
            raise ParameterError(f"texture must be (nx, ny, nz, 3) with every n >= 8, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ParameterError("texture contains non-finite values")
        np.clip(v, 0.0, 1.0, out=v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "spacing", float(self.spacing))
        if not self.spacing > 0:
            raise ParameterError("spacing must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[:3])

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.spacing * (np.asarray(self.dims) - 1)

    def with_values(self, values) -> "TextureGrid":
        return TextureGrid(values, self.origin, self.spacing)

    def contains(self, p, tol: float = 1e-9) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.all((p >= np.asarray(self.origin) - tol) & (p <= self.upper + tol), axis=-1)


def texture_grid(dims: int = 64, extent: float = 2.0, fill: float = 0.5) -> TextureGrid:
    """Cell-centred cube of side ``extent`` about the origin, filled with grey ``fill``."""
    h = extent / dims
    o = -0.5 * extent + 0.5 * h
    return TextureGrid(np.full((dims, dims, dims, 3), fill), (o, o, o), h)


@dataclass(frozen=True)
class BakeConfig:
    k: float = 4.0
    iterations: int = 100
    step: float = 0.5
    reg: float = 1e-3
    dims: int = 64
    extent: float = 2.0

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ParameterError("k must be >= 0")
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")
        if not self.step > 0 or self.reg < 0:
            raise ParameterError("step must be positive and reg non-negative")
        if self.dims < 8:
            raise ParameterError("dims must be >= 8")

    def to_dict(self) -> dict:
        return asdict(self)


def view_aware_weight(view_vec, normal, k: float):
    """``cos^k`` when the surface faces the camera, else 0; works element-wise on ``(..., 3)`` arrays."""
    c = np.sum(np.asarray(view_vec, dtype=np.float64) * np.asarray(normal, dtype=np.float64), axis=-1)
    pos = c > 0
    w = np.where(pos, np.power(np.where(pos, c, 1.0), k), 0.0)
    return float(w) if np.ndim(w) == 0 else w


def _stencil(tex: TextureGrid, p: np.ndarray):
    """Flat voxel indices ``(n, 8)`` and trilinear weights ``(n, 8)``; positions clamp to the border."""
    dims = np.asarray(tex.dims)
    u = (np.asarray(p, dtype=np.float64) - np.asarray(tex.origin)) / tex.spacing
    r = np.rint(u)
    u = np.clip(np.where(np.abs(u - r) < 1e-9, r, u), 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), dims - 2)
    t = u - i0
    idx = np.empty(p.shape[:-1] + (8,), dtype=np.int64)
    wts = np.empty(p.shape[:-1] + (8,))
    c = 0
    for dx in (0, 1):
        wx = t[..., 0] if dx else 1.0 - t[..., 0]
        for dy in (0, 1):
            wy = t[..., 1] if dy else 1.0 - t[..., 1]
            for dz in (0, 1):
                wz = t[..., 2] if dz else 1.0 - t[..., 2]
                ix, iy, iz = i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz
                idx[..., c] = (ix * dims[1] + iy) * dims[2] + iz
                wts[..., c] = wx * wy * wz
                c += 1
    return idx, wts


def sample_texture(tex: TextureGrid, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    idx, wts = _stencil(tex, p)
    flat = tex.values.reshape(-1, 3)
    return np.einsum("...k,...kc->...c", wts, flat[idx])


@dataclass
class Observations:
    """Visible surface samples gathered from all views."""

    position: np.ndarray
    color: np.ndarray
    weight: np.ndarray
    view_index: np.ndarray


def gather_observations(mesh: TriMesh, views, k: float) -> Observations:
    fn = face_normals(mesh)
    pos, col, wt, vid = [], [], [], []
    for i, it in enumerate(views):
        if it.color is None:
            raise ParameterError(f"view {i} has no colour image")
        view = it.view
        r = rasterize_mesh(mesh, view, want_color=False)
        use = r.tri_id >= 0
        if it.mask is not None:
            use &= np.asarray(it.mask) > 0.5
        if not use.any():
            continue
        p = r.position[use]
        n = fn[r.tri_id[use]]
        v = view.position - p
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pos.append(p)
        col.append(np.asarray(it.color, dtype=np.float64)[use])
        wt.append(view_aware_weight(v, n, k))
        vid.append(np.full(len(p), i))
    if not pos:
        return Observations(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))
    return Observations(np.concatenate(pos), np.concatenate(col), np.concatenate(wt), np.concatenate(vid))


def _pair_count(dims) -> int:
    nx, ny, nz = dims
    return (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)


def _smooth_energy_grad(t: np.ndarray):
    """Sum of squared neighbour differences and its gradient, for ``(nx, ny, nz, 3)``."""
    e = 0.0
    g = np.zeros_like(t)
    for a in range(3):
        d = np.diff(t, axis=a)
        e += float(np.sum(d * d))
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        g[tuple(lo)] -= 2.0 * d
        g[tuple(hi)] += 2.0 * d
    return e, g


def _degree(dims) -> np.ndarray:
    deg = np.zeros(dims)
    for a in range(3):
        deg += 2.0
        end = [slice(None)] * 3
        end[a] = 0
        deg[tuple(end)] -= 1.0
        end[a] = -1
        deg[tuple(end)] -= 1.0
    return deg


@dataclass
class BakeResult:
    texture: TextureGrid
    trace: list[float]
    observations: int


def _objective(tex: TextureGrid, obs: Observations, reg_weight: float):
    """Loss/gradient closure and Jacobi preconditioner for one texture lattice."""
    nvox = int(np.prod(tex.dims))
    keep = obs.weight > 0
    idx, wts = _stencil(tex, obs.position[keep])
    rows = np.repeat(np.arange(len(idx)), 8)
    a = sparse.csr_matrix((wts.ravel(), (rows, idx.ravel())), shape=(len(idx), nvox))
    w = obs.weight[keep]
    c = obs.color[keep]
    wsum = float(w.sum())
    reg = reg_weight / _pair_count(tex.dims)

    def loss_grad(t, want_grad=True):
        flat = t.reshape(-1, 3)
        if wsum > 0:
            r = a @ flat - c
            data = float(np.sum(w[:, None] * r * r)) / wsum
            g = (2.0 / wsum) * (a.T @ (w[:, None] * r)) if want_grad else None
        else:
            data, g = 0.0, (np.zeros_like(flat) if want_grad else None)
        e, ge = _smooth_energy_grad(t)
        loss = data + reg * e
        if want_grad:
            g = g.reshape(t.shape) + reg * ge
        return loss, g

    diag = np.zeros(nvox)
    if wsum > 0:
        diag = (2.0 / wsum) * (a.multiply(a).T @ w)
    diag = diag.reshape(tex.dims) + 2.0 * reg * _degree(tex.dims)
    return loss_grad, 1.0 / np.maximum(diag, 1e-300)[..., None], int(keep.sum())


def _descend(t: np.ndarray, loss_grad, precond: np.ndarray, iterations: int, step: float):
    """Projected, preconditioned gradient descent with Nesterov momentum and a monotone safeguard."""
    loss, _ = loss_grad(t, want_grad=False)
    trace = [loss]
    prev = t
    mom = 1.0
    for _ in range(iterations):
        while True:
            nxt = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * mom * mom))
            y = t + ((mom - 1.0) / nxt) * (t - prev)
            _, gy = loss_grad(y)
            cand = np.clip(y - step * precond * gy, 0.0, 1.0)
            cl, _ = loss_grad(cand, want_grad=False)
            if cl <= loss:
                prev, t, loss, mom = t, cand, cl, nxt
                break
            # reject: drop the momentum first, then halve the step
            if mom > 1.0:
                mom, prev = 1.0, t
            elif step > MIN_STEP:
                step = max(step * 0.5, MIN_STEP)
            else:
                break
        trace.append(loss)
    return t, trace


def _coarser(tex: TextureGrid) -> TextureGrid | None:
    """Half-resolution lattice over the same box, or None when the grid is too small or odd."""
    if any(n % 2 or n < 16 for n in tex.dims):
        return None
    lo = np.asarray(tex.origin) - 0.5 * tex.spacing
    h = 2.0 * tex.spacing
    dims = tuple(n // 2 for n in tex.dims)
    coarse = np.asarray(tex.values).reshape(dims[0], 2, dims[1], 2, dims[2], 2, 3).mean(axis=(1, 3, 5))
    return TextureGrid(coarse, tuple(lo + 0.5 * h), h)


def bake(mesh: TriMesh, views, cfg: BakeConfig | None = None, init: TextureGrid | None = None) -> BakeResult:
    """Optimize the texture against the view colours.

    Each level runs Jacobi-preconditioned projected gradient descent with
    Nesterov momentum.  A step that raises the loss is rejected; the momentum
    is reset first, and if a plain step also fails the step size is halved
    (never below ``MIN_STEP``), so every trace is non-increasing.  Values are
    clamped to [0, 1] after every step.

    Levels run coarse to fine (halving the lattice down to 8 per axis), each
    started from the trilinear upsampling of the previous result.  Without
    this, colour spreads into unobserved space one voxel per step.  The
    returned trace is the finest level's, starting at the loss of its
    starting texture.
    """
    cfg = cfg or BakeConfig()
    tex = init or texture_grid(cfg.dims, cfg.extent)
    if len(mesh.vertices) and not np.all(tex.contains(mesh.vertices)):
        raise ParameterError("mesh extends outside the texture grid")
    obs = gather_observations(mesh, views, cfg.k)
    if cfg.iterations == 0:
        loss_grad, _, used = _objective(tex, obs, cfg.reg)
        return BakeResult(tex, [loss_grad(np.array(tex.values), want_grad=False)[0]], used)
    levels = [tex]
    while (c := _coarser(levels[-1])) is not None:
        levels.append(c)
    t = np.array(levels[-1].values)
    for lev, nxt in zip(levels[::-1], levels[-2::-1] + [None]):
        loss_grad, precond, used = _objective(lev, obs, cfg.reg)
        t, trace = _descend(t, loss_grad, precond, cfg.iterations, cfg.step)
        if nxt is not None:
            t = sample_texture(lev.with_values(t), _lattice_points(nxt))
    return BakeResult(tex.with_values(t), trace, used)


def _lattice_points(tex: TextureGrid) -> np.ndarray:
    axes = [tex.origin[a] + tex.spacing * np.arange(tex.dims[a]) for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def query_vertex_colors(mesh: TriMesh, tex: TextureGrid) -> TriMesh:
    """Trilinear texture lookup at every vertex; out-of-bounds vertices clamp to the border voxels."""
    return mesh.replace(colors=np.clip(sample_texture(tex, mesh.vertices), 0.0, 1.0))


def render_textured(mesh: TriMesh, tex: TextureGrid, view) -> tuple[np.ndarray, np.ndarray]:
    """Colour image by texture lookup at each visible surface point, plus the coverage mask."""
    r = rasterize_mesh(mesh, view, want_color=False)
    hit = r.tri_id >= 0
    img = np.zeros((view.height, view.width, 3))
    if hit.any():
        img[hit] = sample_texture(tex, r.position[hit])
    return img, hit


def texture_to_bytes(tex: TextureGrid) -> bytes:
    head = _TEXG_HEADER.pack(TEXG_MAGIC, TEXG_VERSION, *tex.dims, *tex.origin, tex.spacing)
    # voxel order x fastest, RGB interleaved per voxel
    return head + np.ascontiguousarray(tex.values.transpose(2, 1, 0, 3), dtype="<f4").tobytes()


def texture_from_bytes(data: bytes) -> TextureGrid:
    if len(data) < _TEXG_HEADER.size:
        raise FormatError("truncated TEXG header")
    magic, version, nx, ny, nz, ox, oy, oz, h = _TEXG_HEADER.unpack_from(data)
    if magic != TEXG_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != TEXG_VERSION:
        raise FormatError(f"unsupported TEXG version {version}")
    n = nx * ny * nz * 3
    if len(data) != _TEXG_HEADER.size + 4 * n:
        raise FormatError(f"TEXG payload size mismatch: expected {4 * n} bytes")
    v = np.frombuffer(data, dtype="<f4", offset=_TEXG_HEADER.size).reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
    return TextureGrid(v.astype(np.float64), (ox, oy, oz), h)


def write_texture(tex: TextureGrid, path) -> None:
    Path(path).write_bytes(texture_to_bytes(tex))


def read_texture(path) -> TextureGrid:
    return texture_from_bytes(Path(path).read_bytes())
