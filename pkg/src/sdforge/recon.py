"""Multi-view SDF reconstruction from mask and normal priors.

Three stages:

1. ``carve_init``: a visual hull of the six masks, turned into a signed field
   with Euclidean distance transforms and encoded into the latent space.
2. ``optimize_coarse``: Adam on the 16^3 latent, rendering ``decode(phi)``
   with the soft projector and back-propagating through the decoder.
3. ``optimize_refine``: the coarse field is frozen and a full-resolution
   residual, clamped to ``residual_cap`` voxels, is optimized on top of it.

The loss at iteration ``t`` is ``beta(t) * L_mask + (1 - beta(t)) * L_normal``
with ``beta`` falling linearly over both stages and the softness ``tau``
decaying geometrically during the coarse stage.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .camera import ViewSet
from .codec import CodecConfig, LatentCode, decode, decode_jacobian_apply, decode_values, encode, write_latent
from .errors import NoForegroundError, ParameterError
from .sdf import SdfGrid, centered_grid, grid_from_function, write_grid
from .soft import RayBundle, fused_loss_grad, soft_project_rays


class OptimizationError(RuntimeError):
    """The loss became non-finite."""


@dataclass(frozen=True)
class ReconConfig:
    """Reconstruction settings.

    ``tau_start`` / ``tau_end`` and ``residual_cap`` are in voxel spacings.
    ``image_size`` is the resolution the priors are box-filtered down to
    before optimization.  ``threshold`` is the loss level used for
    iterations-to-threshold.  ``fixation=False`` lets the refinement stage
    keep moving the latent and drops the residual clamp (ablation only).
    """

    coarse_iters: int = 400
    refine_iters: int = 150
    beta_hi: float = 0.8
    beta_lo: float = 0.3
    lr_coarse: float = 0.05
    lr_refine: float = 0.01
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    tau_start: float = 2.0
    tau_end: float = 0.5
    residual_cap: float = 0.5
    samples_per_ray: int = 48
    image_size: int = 64
    threshold: float = 0.05
    use_init: bool = True
    fixation: bool = True
    carve_dilate: int = 1
    depth_weight: float = 0.0
    grid_dims: int = 64
    world_extent: float = 2.0
    codec: CodecConfig = field(default_factory=CodecConfig)

    def __post_init__(self) -> None:
        if self.coarse_iters < 1 or self.refine_iters < 0:
            raise ParameterError("coarse_iters must be >= 1 and refine_iters >= 0")
        if not 0 < self.beta_lo < self.beta_hi < 1:
            raise ParameterError("need 0 < beta_lo < beta_hi < 1")
        if self.lr_coarse < 0 or self.lr_refine < 0:
            raise ParameterError("step sizes must be non-negative")
        if not (0 <= self.adam_b1 < 1 and 0 <= self.adam_b2 < 1 and self.adam_eps > 0):
            raise ParameterError("invalid Adam moment decays or epsilon")
        if not 0 < self.tau_end <= self.tau_start:
            raise ParameterError("need 0 < tau_end <= tau_start")
        if not self.residual_cap > 0:
            raise ParameterError("residual_cap must be positive")
        if self.image_size < 32:
            raise ParameterError("image_size must be >= 32")
        if self.carve_dilate < 0 or self.depth_weight < 0:
            raise ParameterError("carve_dilate and depth_weight must be non-negative")
        if self.grid_dims != self.codec.fine_dims:
            raise ParameterError("grid_dims must equal codec.fine_dims")

    @property
    def total_iters(self) -> int:
        return self.coarse_iters + self.refine_iters

    @property
    def spacing(self) -> float:
        return self.world_extent / self.grid_dims

    def template(self) -> SdfGrid:
        return centered_grid(self.grid_dims, self.world_extent)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown ReconConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "codec" in d and isinstance(d["codec"], dict):
            extra = set(d["codec"]) - set(CodecConfig.__dataclass_fields__)
            if extra:
                raise ParameterError(f"unknown CodecConfig keys: {sorted(extra)}")
            d["codec"] = CodecConfig(**d["codec"])
        return cls(**d)


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------

def beta_schedule(it: int, cfg: ReconConfig) -> float:
    """Linear from ``beta_hi`` at iteration 0 to ``beta_lo`` at the last iteration."""
    last = cfg.total_iters - 1
    if not 0 <= it <= cfg.total_iters:
        raise ParameterError(f"iteration {it} outside [0, {cfg.total_iters}]")
    if last <= 0:
        return cfg.beta_hi
    frac = min(it / last, 1.0)
    return cfg.beta_hi + (cfg.beta_lo - cfg.beta_hi) * frac


def tau_schedule(it: int, cfg: ReconConfig) -> float:
    """World-unit softness: geometric decay over the coarse stage, then constant."""
    h = cfg.spacing
    span = cfg.coarse_iters - 1
    frac = 1.0 if span <= 0 else min(max(it / span, 0.0), 1.0)
    return h * cfg.tau_start * (cfg.tau_end / cfg.tau_start) ** frac


# --------------------------------------------------------------------------
# priors at optimization resolution
# --------------------------------------------------------------------------

@dataclass
class PreparedView:
    rays: RayBundle
    mask: np.ndarray
    normal: np.ndarray
    interior: np.ndarray
    depth: np.ndarray | None = None


def _downsample(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img.astype(np.float64)
    if h % size == 0 and w % size == 0:
        fy, fx = h // size, w // size
        shp = (size, fy, size, fx) + img.shape[2:]
        return img.reshape(shp).mean(axis=(1, 3))
    from skimage.transform import resize

    return resize(img.astype(np.float64), (size, size) + img.shape[2:], order=1, anti_aliasing=True)


def prepare_views(views: ViewSet, size: int) -> list[PreparedView]:
    """Box-filter mask and normal priors down to ``size``^2.

    A pixel contributes to the normal loss only when it is fully covered by
    the prior mask; its target normal is the renormalized mean.
    """
    out = []
    for it in views:
        if it.mask is None or it.normal is None:
            raise ParameterError("every view needs a mask and a normal prior")
        m = _downsample(np.clip(np.asarray(it.mask, dtype=np.float64), 0.0, 1.0), size)
        n = _downsample(np.asarray(it.normal, dtype=np.float64), size)
        norm = np.linalg.norm(n, axis=-1)
        interior = (m >= 1.0 - 1e-9) & (norm > 0.5)
        n = np.where(interior[..., None], n / np.maximum(norm, 1e-12)[..., None], 0.0)
        depth = None
        if it.depth is not None:
            d = np.asarray(it.depth, dtype=np.float64)
            big = np.asarray(it.mask) > 0.5
            dsum = _downsample(np.where(big, d, 0.0), size)
            depth = np.where(interior, dsum / np.maximum(m, 1e-12), 0.0)
        out.append(PreparedView(RayBundle.from_view(it.view.resized(size)), m, n, interior, depth))
    return out


# --------------------------------------------------------------------------
# space carving
# --------------------------------------------------------------------------

def carve_hull(views: ViewSet, template: SdfGrid, dilate: int = 1) -> np.ndarray:
    """Boolean visual hull on ``template``'s voxel centres.

    A voxel is kept when its centre projects inside the mask of every view.
    Masks are dilated by ``dilate`` pixels first so that pixel-centre
    coverage never removes a voxel whose centre lies inside the true
    silhouette.
    """
    masks = [None if it.mask is None else np.asarray(it.mask) > 0.5 for it in views]
    if any(m is None for m in masks):
        raise ParameterError("every view needs a mask")
    if not any(m.any() for m in masks):
        raise NoForegroundError()
    pts = template.centers().reshape(-1, 3)
    keep = np.ones(len(pts), dtype=bool)
    for it, m in zip(views, masks):
        if dilate:
            m = ndimage.binary_dilation(m, structure=np.ones((3, 3), dtype=bool), iterations=dilate)
        sc, z = it.view.project(pts)
        col = np.floor(sc[:, 0]).astype(np.int64)
        row = np.floor(sc[:, 1]).astype(np.int64)
        ok = (z > 0) & (col >= 0) & (col < m.shape[1]) & (row >= 0) & (row < m.shape[0])
        hit = np.zeros(len(pts), dtype=bool)
        hit[ok] = m[row[ok], col[ok]]
        keep &= hit
    hull = keep.reshape(template.dims)
    if not hull.any():
        raise NoForegroundError("no foreground: masks have an empty visual hull")
    return hull


def occupancy_to_sdf(inside: np.ndarray, spacing: float) -> np.ndarray:
    """Signed distance (negative inside) from a voxel occupancy, half-voxel corrected."""
    if inside.all() or not inside.any():
        raise ParameterError("occupancy must contain both inside and outside voxels")
    d_out = ndimage.distance_transform_edt(~inside)
    d_in = ndimage.distance_transform_edt(inside)
    return np.where(inside, -(d_in - 0.5), d_out - 0.5) * spacing


def carve_init(views: ViewSet, cfg: ReconConfig | None = None) -> LatentCode:
    cfg = cfg or ReconConfig()
    tmpl = cfg.template()
    hull = carve_hull(views, tmpl, cfg.carve_dilate)
    return encode(tmpl.with_values(occupancy_to_sdf(hull, tmpl.spacing)), cfg.codec)


def generic_init(cfg: ReconConfig | None = None) -> LatentCode:
    """View-independent start for the no-initialization arm: a centred sphere of radius extent/4."""
    cfg = cfg or ReconConfig()
    r = 0.25 * cfg.world_extent
    g = grid_from_function(lambda p: np.linalg.norm(p, axis=-1) - r, cfg.grid_dims, cfg.world_extent)
    return encode(g, cfg.codec)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    loss: float
    mask: float
    normal: float
    depth: float
    per_view: list[tuple[float, float]]


def _as_prepared(views, cfg: ReconConfig) -> list[PreparedView]:
    if isinstance(views, ViewSet):
        return prepare_views(views, cfg.image_size)
    return list(views)


def _loss_grad(values: np.ndarray, grid: SdfGrid, prep: list[PreparedView], beta: float, tau: float,
               spr: int, depth_weight: float = 0.0, want_grad: bool = True):
    nv = len(prep)
    grad = np.zeros(values.shape) if want_grad else None
    lm = ln = ld = 0.0
    per_view = []
    for pv in prep:
        npix = pv.mask.size
        nint = max(int(pv.interior.sum()), 1)
        mw = 1.0 / (nv * npix)
        nw = pv.interior / (nv * nint)
        dw = None
        if depth_weight > 0 and pv.depth is not None:
            dw = depth_weight * pv.interior / (nv * nint)
        if want_grad:
            _, sums, grad = fused_loss_grad(values, grid.origin, grid.spacing, pv.rays, tau, spr, pv.mask, pv.normal,
                                            nw, mw, pv.depth, dw, grad=grad,
                                            grad_scale=(beta, 1.0 - beta, 1.0))
            vm, vn, vd = sums
        else:
            r = soft_project_rays(values, grid.origin, grid.spacing, pv.rays, tau, spr)
            vm = float(np.sum(mw * (r.mask - pv.mask) ** 2))
            vn = float(np.sum(nw * (1.0 - np.einsum("ijk,ijk->ij", r.normal, pv.normal))))
            vd = 0.0 if dw is None else float(np.sum(dw * (r.depth - pv.depth) ** 2))
        lm += vm
        ln += vn
        ld += vd
        per_view.append((vm * nv, vn * nv))
    loss = beta * lm + (1.0 - beta) * ln + ld
    return LossBreakdown(loss, lm, ln, ld, per_view), grad


def loss_eval(grid: SdfGrid, views, beta: float, tau: float, cfg: ReconConfig | None = None) -> LossBreakdown:
    """``beta * L_mask + (1 - beta) * L_normal`` (plus the optional depth term).

    ``L_mask`` is the mean over views of the pixel-mean squared mask error;
    ``L_normal`` is the mean over views of the mean ``1 - cos`` over pixels
    fully inside the prior mask.  ``per_view`` lists each view's
    ``(mask, normal)`` terms.
    """
    cfg = cfg or ReconConfig()
    if not 0 <= beta <= 1:
        raise ParameterError("beta must lie in [0, 1]")
    prep = _as_prepared(views, cfg)
    out, _ = _loss_grad(grid.values, grid, prep, beta, tau, cfg.samples_per_ray, cfg.depth_weight, want_grad=False)
    return out


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TraceRow:
    iter: int
    beta: float
    tau: float
    loss: float
    l_mask: float
    l_normal: float


def _record(trace, it, beta, tau, br: LossBreakdown) -> None:
    if not math.isfinite(br.loss):
        raise OptimizationError(f"non-finite loss at iteration {it}")
    trace.append(TraceRow(it, beta, tau, br.loss, br.mask, br.normal))


def optimize_coarse(init: LatentCode, views, cfg: ReconConfig | None = None, iters: int | None = None):
    """Adam on the latent; returns ``(best latent, trace)``."""
    cfg = cfg or ReconConfig()
    prep = _as_prepared(views, cfg)
    tmpl = cfg.template()
    phi = np.array(init.values)
    opt = Adam(cfg.lr_coarse, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    best, best_loss = phi.copy(), math.inf
    trace: list[TraceRow] = []
    for it in range(cfg.coarse_iters if iters is None else iters):
        beta, tau = beta_schedule(it, cfg), tau_schedule(it, cfg)
        values = decode_values(phi, cfg.codec)
        br, g = _loss_grad(values, tmpl, prep, beta, tau, cfg.samples_per_ray, cfg.depth_weight)
        _record(trace, it, beta, tau, br)
        if br.loss < best_loss:
            best, best_loss = phi.copy(), br.loss
        phi = opt.step(phi, decode_jacobian_apply(g, cfg.codec))
    return init.with_values(best), trace


def optimize_refine(phi_star: LatentCode, views, cfg: ReconConfig | None = None):
    """Residual refinement on top of the frozen ``decode(phi_star)``.

    Returns ``(residual grid, trace)``.  With ``cfg.fixation`` off the latent
    keeps moving too and the residual is not clamped; the returned residual
    is then the total change relative to ``decode(phi_star)``.
    """
    cfg = cfg or ReconConfig()
    prep = _as_prepared(views, cfg)
    base_grid = decode(phi_star, cfg.codec)
    base = base_grid.values
    cap = cfg.residual_cap * cfg.spacing
    r = np.zeros(base.shape)
    phi = np.array(phi_star.values)
    opt_r = Adam(cfg.lr_refine, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    opt_p = Adam(cfg.lr_refine, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    best, best_loss = r.copy(), math.inf
    trace: list[TraceRow] = []
    for k in range(cfg.refine_iters):
        it = cfg.coarse_iters + k
        beta, tau = beta_schedule(it, cfg), tau_schedule(it, cfg)
        coarse = base if cfg.fixation else decode_values(phi, cfg.codec)
        total = coarse + r
        br, g = _loss_grad(total, base_grid, prep, beta, tau, cfg.samples_per_ray, cfg.depth_weight)
        _record(trace, it, beta, tau, br)
        if br.loss < best_loss:
            best, best_loss = (r.copy() if cfg.fixation else total - base), br.loss
        r = opt_r.step(r, g)
        if cfg.fixation:
            np.clip(r, -cap, cap, out=r)
        else:
            phi = opt_p.step(phi, decode_jacobian_apply(g, cfg.codec))
    return base_grid.with_values(best), trace


# --------------------------------------------------------------------------
# full pipeline
# --------------------------------------------------------------------------

@dataclass
class ReconResult:
    latent: LatentCode
    residual: SdfGrid
    final: SdfGrid
    trace: list[TraceRow]
    iters_to_threshold: int
    config: ReconConfig

    @property
    def coarse(self) -> SdfGrid:
        return decode(self.latent, self.config.codec)

    @property
    def final_loss(self) -> float:
        return min(row.loss for row in self.trace)


def iterations_to_threshold(trace, threshold: float, sentinel: int) -> int:
    """1-based count of iterations until the loss first drops below ``threshold``; ``sentinel`` if never."""
    for k, row in enumerate(trace):
        if row.loss < threshold:
            return k + 1
    return sentinel


def reconstruct(views: ViewSet, cfg: ReconConfig | None = None) -> ReconResult:
    cfg = cfg or ReconConfig()
    if cfg.use_init:
        init = carve_init(views, cfg)
    else:
        if not any(it.mask is not None and np.any(np.asarray(it.mask) > 0.5) for it in views):
            raise NoForegroundError()
        init = generic_init(cfg)
    prep = prepare_views(views, cfg.image_size)
    phi_star, t1 = optimize_coarse(init, prep, cfg)
    residual, t2 = optimize_refine(phi_star, prep, cfg)
    final = residual.with_values(decode(phi_star, cfg.codec).values + residual.values)
    trace = t1 + t2
    its = iterations_to_threshold(trace, cfg.threshold, cfg.total_iters + 1)
    return ReconResult(phi_star, residual, final, trace, its, cfg)


def save_result(res: ReconResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_latent(res.latent, out / "latent.latf")
    write_grid(res.coarse, out / "coarse.sdfg")
    write_grid(res.residual, out / "residual.sdfg")
    write_grid(res.final, out / "final.sdfg")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "beta", "tau", "loss", "L_mask", "L_normal"])
        for row in res.trace:
            w.writerow([row.iter, repr(row.beta), repr(row.tau), repr(row.loss), repr(row.l_mask), repr(row.l_normal)])
    summary = {"iters_to_threshold": res.iters_to_threshold, "final_loss": res.final_loss}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
