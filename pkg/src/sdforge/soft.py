"""Differentiable soft projection of an SDF grid into mask, depth and normal images.

Each pixel ray is clipped to the box spanned by the voxel centres and sampled
at ``N`` stratified midpoints ``t_j``.  With ``Phi_j = logistic(s_j / tau)``
the opacity of segment ``j`` is

    alpha_j = max(1 - Phi_{j+1} / Phi_j, 0)

which makes the transmittance telescope along stretches where the SDF
decreases.  For a ray whose SDF dips once and rises again the soft mask
``1 - prod(1 - alpha_j)`` equals ``1 - Phi(s_min) / Phi(s_entry)``, i.e. about
``logistic(-s_min / tau)``: 0.5 exactly at a tangent ray, so the silhouette is
not biased outwards by the number of samples near the surface.

The compositing weights ``w_j = T_j alpha_j`` give the expected hit distance
(segments are placed at their midpoints) and the normal is the normalized
central-difference gradient of the trilinear field at that point.  The
backward pass is hand-written reverse mode through all of these steps.

Background pixels (rays missing the box, or with total weight below
``WEIGHT_EPS``) get depth 0 and a zero normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .camera import View
from .errors import ParameterError
from .sdf import SdfGrid

WEIGHT_EPS = 1e-10


@numba.njit(cache=True, inline="always")
def _sigmoid_pair(x):
    """(logistic(x), logistic(-x)) from a single exponential; |x| is capped at 600."""
    if x > 600.0:
        x = 600.0
    elif x < -600.0:
        x = -600.0
    if x >= 0:
        e = math.exp(-x)
        return 1.0 / (1.0 + e), e / (1.0 + e)
    e = math.exp(x)
    return e / (1.0 + e), 1.0 / (1.0 + e)


@numba.njit(cache=True)
def _cell(u, n):
    if u < 0.0:
        u = 0.0
    elif u > n - 1.0:
        u = n - 1.0
    i = int(math.floor(u))
    if i > n - 2:
        i = n - 2
    return i, u - i


@numba.njit(cache=True)
def _sample(v, ux, uy, uz):
    nx, ny, nz = v.shape
    i, fx = _cell(ux, nx)
    j, fy = _cell(uy, ny)
    k, fz = _cell(uz, nz)
    c00 = v[i, j, k] * (1 - fx) + v[i + 1, j, k] * fx
    c10 = v[i, j + 1, k] * (1 - fx) + v[i + 1, j + 1, k] * fx
    c01 = v[i, j, k + 1] * (1 - fx) + v[i + 1, j, k + 1] * fx
    c11 = v[i, j + 1, k + 1] * (1 - fx) + v[i + 1, j + 1, k + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@numba.njit(cache=True)
def _sample_dpos(v, ux, uy, uz, out):
    """Index-space gradient of the trilinear interpolant (zero along clamped axes)."""
    nx, ny, nz = v.shape
    i, fx = _cell(ux, nx)
    j, fy = _cell(uy, ny)
    k, fz = _cell(uz, nz)
    gx = 0.0
    gy = 0.0
    gz = 0.0
    for dx in range(2):
        wx = fx if dx else 1.0 - fx
        sx = 1.0 if dx else -1.0
        for dy in range(2):
            wy = fy if dy else 1.0 - fy
            sy = 1.0 if dy else -1.0
            for dz in range(2):
                wz = fz if dz else 1.0 - fz
                sz = 1.0 if dz else -1.0
                val = v[i + dx, j + dy, k + dz]
                gx += sx * wy * wz * val
                gy += wx * sy * wz * val
                gz += wx * wy * sz * val
    out[0] = gx if 0.0 <= ux <= nx - 1.0 else 0.0
    out[1] = gy if 0.0 <= uy <= ny - 1.0 else 0.0
    out[2] = gz if 0.0 <= uz <= nz - 1.0 else 0.0


@numba.njit(cache=True)
def _scatter(g, ux, uy, uz, coef):
    nx, ny, nz = g.shape
    i, fx = _cell(ux, nx)
    j, fy = _cell(uy, ny)
    k, fz = _cell(uz, nz)
    for dx in range(2):
        wx = fx if dx else 1.0 - fx
        for dy in range(2):
            wy = fy if dy else 1.0 - fy
            for dz in range(2):
                wz = fz if dz else 1.0 - fz
                g[i + dx, j + dy, k + dz] += coef * wx * wy * wz


@numba.njit(cache=True)
def _ray_box(o, d, lo, hi):
    t0 = -1e300
    t1 = 1e300
    for a in range(3):
        if abs(d[a]) < 1e-300:
            if o[a] < lo[a] or o[a] > hi[a]:
                return 1.0, 0.0
            continue
        ta = (lo[a] - o[a]) / d[a]
        tb = (hi[a] - o[a]) / d[a]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    return max(t0, 0.0), t1


@numba.njit(cache=True)
def _central_stencil(v, u, axis, upos, uneg):
    """Fill the +/- sample positions for one axis; returns (den, dhi, dlo)."""
    n = v.shape[axis]
    for q in range(3):
        upos[q] = u[q]
        uneg[q] = u[q]
    hi = u[axis] + 1.0
    dhi = 1.0
    if hi > n - 1.0:
        hi = n - 1.0
        dhi = 0.0
    lo = u[axis] - 1.0
    dlo = 1.0
    if lo < 0.0:
        lo = 0.0
        dlo = 0.0
    upos[axis] = hi
    uneg[axis] = lo
    return hi - lo, dhi, dlo


@numba.njit(cache=True)
def _clamped_index(v, p, origin, h, u, free):
    for q in range(3):
        x = (p[q] - origin[q]) / h
        n = v.shape[q]
        free[q] = 1.0
        if x < 0.0:
            x = 0.0
            free[q] = 0.0
        elif x > n - 1.0:
            x = n - 1.0
            free[q] = 0.0
        u[q] = x


@numba.njit(cache=True)
def _normal_at(v, p, origin, h, nout, u, free, upos, uneg):
    _clamped_index(v, p, origin, h, u, free)
    for a in range(3):
        den, _, _ = _central_stencil(v, u, a, upos, uneg)
        fp = _sample(v, upos[0], upos[1], upos[2])
        fm = _sample(v, uneg[0], uneg[1], uneg[2])
        nout[a] = (fp - fm) / (den * h)
    return math.sqrt(nout[0] ** 2 + nout[1] ** 2 + nout[2] ** 2)


TRANS_EPS = 1e-12


@numba.njit(cache=True)
def _composite(v, o, d, t0, t1, nsamp, tau, origin, h, s, phi, phic, alpha, a_raw, tmid, trans_before):
    """March one ray; returns (mask, weight sum, expected t, segments used).

    Marching stops once the transmittance drops below ``TRANS_EPS``; the
    remaining segments carry no weight and receive no gradient.
    """
    dt = (t1 - t0) / nsamp
    ih = 1.0 / h
    ux0 = (o[0] - origin[0]) * ih
    uy0 = (o[1] - origin[1]) * ih
    uz0 = (o[2] - origin[2]) * ih
    dx = d[0] * ih
    dy = d[1] * ih
    dz = d[2] * ih
    itau = 1.0 / tau
    t = t0 + 0.5 * dt
    s[0] = _sample(v, ux0 + t * dx, uy0 + t * dy, uz0 + t * dz)
    phi[0], phic[0] = _sigmoid_pair(s[0] * itau)
    trans = 1.0
    wsum = 0.0
    wt = 0.0
    used = 0
    for j in range(nsamp - 1):
        t = t0 + (j + 1.5) * dt
        s[j + 1] = _sample(v, ux0 + t * dx, uy0 + t * dy, uz0 + t * dz)
        phi[j + 1], phic[j + 1] = _sigmoid_pair(s[j + 1] * itau)
        a = 1.0 - phi[j + 1] / phi[j]
        a_raw[j] = a
        al = a if a > 0.0 else 0.0
        alpha[j] = al
        tmid[j] = t - 0.5 * dt
        trans_before[j] = trans
        w = trans * al
        wsum += w
        wt += w * tmid[j]
        trans *= 1.0 - al
        used = j + 1
        if trans < TRANS_EPS:
            break
    that = wt / wsum if wsum > WEIGHT_EPS else 0.0
    return 1.0 - trans, wsum, that, used


@numba.njit(cache=True)
def _ray_backward(v, o, d, cosang, t0, t1, nsamp, tau, origin, h, phic, alpha, a_raw, tmid, trans_before,
                  wsum, that, used, gm, gnx, gny, gnz, gz, grad, work):
    """Scatter the gradient of one ray's outputs into ``grad``."""
    dt = (t1 - t0) / nsamp
    p = work[0]
    nv = work[1]
    u = work[2]
    free = work[3]
    upos = work[4]
    uneg = work[5]
    dp = work[6]
    dm = work[7]
    nbar = work[8]
    ubar = work[9]
    tbar = 0.0
    if wsum > WEIGHT_EPS:
        tbar = gz * cosang
        if gnx != 0.0 or gny != 0.0 or gnz != 0.0:
            for q in range(3):
                p[q] = o[q] + that * d[q]
            norm = _normal_at(v, p, origin, h, nv, u, free, upos, uneg)
            if norm > 1e-12:
                n0, n1, n2 = nv[0] / norm, nv[1] / norm, nv[2] / norm
                dotp = n0 * gnx + n1 * gny + n2 * gnz
                nbar[0] = (gnx - n0 * dotp) / norm
                nbar[1] = (gny - n1 * dotp) / norm
                nbar[2] = (gnz - n2 * dotp) / norm
                _clamped_index(v, p, origin, h, u, free)
                ubar[0] = 0.0
                ubar[1] = 0.0
                ubar[2] = 0.0
                for a in range(3):
                    den, dhi, dlo = _central_stencil(v, u, a, upos, uneg)
                    c = nbar[a] / (den * h)
                    if c == 0.0:
                        continue
                    _scatter(grad, upos[0], upos[1], upos[2], c)
                    _scatter(grad, uneg[0], uneg[1], uneg[2], -c)
                    _sample_dpos(v, upos[0], upos[1], upos[2], dp)
                    _sample_dpos(v, uneg[0], uneg[1], uneg[2], dm)
                    for q in range(3):
                        if q == a:
                            ubar[q] += c * (dp[q] * dhi - dm[q] * dlo)
                        else:
                            ubar[q] += c * (dp[q] - dm[q])
                    if dhi != dlo:
                        # 1 / den varies when one side of the stencil is clamped
                        diff = _sample(v, upos[0], upos[1], upos[2]) - _sample(v, uneg[0], uneg[1], uneg[2])
                        ubar[a] += -nbar[a] * diff / (den * den * h) * (dhi - dlo)
                for q in range(3):
                    tbar += ubar[q] * free[q] / h * d[q]
    ucarry = 0.0
    prev_bar = 0.0  # gradient w.r.t. x_{j+1} carried down to the next (lower) index
    for j in range(used - 1, -1, -1):
        wb = gm
        if wsum > WEIGHT_EPS:
            wb += tbar * (tmid[j] - that) / wsum
        abar = trans_before[j] * (wb - ucarry)
        ucarry = wb * alpha[j] + (1.0 - alpha[j]) * ucarry
        xbar_hi = prev_bar
        xbar_lo = 0.0
        if a_raw[j] > 0.0:
            ratio = 1.0 - a_raw[j]
            xbar_lo = abar * ratio * phic[j]
            xbar_hi -= abar * ratio * phic[j + 1]
        if xbar_hi != 0.0:
            t = t0 + (j + 1.5) * dt
            _scatter(grad, (o[0] + t * d[0] - origin[0]) / h,
                     (o[1] + t * d[1] - origin[1]) / h,
                     (o[2] + t * d[2] - origin[2]) / h, xbar_hi / tau)
        prev_bar = xbar_lo
    if prev_bar != 0.0:
        t = t0 + 0.5 * dt
        _scatter(grad, (o[0] + t * d[0] - origin[0]) / h,
                 (o[1] + t * d[1] - origin[1]) / h,
                 (o[2] + t * d[2] - origin[2]) / h, prev_bar / tau)


@numba.njit(cache=True)
def _bounds(v, origin, h):
    hi = np.empty(3)
    for q in range(3):
        hi[q] = origin[q] + (v.shape[q] - 1) * h
    return origin.copy(), hi


@numba.njit(cache=True)
def _forward(v, origin, h, cam, dirs, cosang, tau, nsamp, mask, depth, normal):
    lo, hi = _bounds(v, origin, h)
    s = np.empty(nsamp)
    phi = np.empty(nsamp)
    phic = np.empty(nsamp)
    alpha = np.zeros(nsamp)
    a_raw = np.zeros(nsamp)
    tmid = np.empty(nsamp)
    trans_before = np.empty(nsamp)
    p = np.empty(3)
    nv = np.empty(3)
    work = np.empty((10, 3))
    for r in range(dirs.shape[0]):
        d = dirs[r]
        mask[r] = 0.0
        depth[r] = 0.0
        normal[r, 0] = 0.0
        normal[r, 1] = 0.0
        normal[r, 2] = 0.0
        t0, t1 = _ray_box(cam, d, lo, hi)
        if t1 <= t0:
            continue
        m, wsum, that, used = _composite(v, cam, d, t0, t1, nsamp, tau, origin, h, s, phi, phic, alpha,
                                         a_raw, tmid, trans_before)
        mask[r] = m
        if wsum <= WEIGHT_EPS:
            continue
        depth[r] = that * cosang[r]
        for q in range(3):
            p[q] = cam[q] + that * d[q]
        norm = _normal_at(v, p, origin, h, nv, work[2], work[3], work[4], work[5])
        if norm > 1e-12:
            for q in range(3):
                normal[r, q] = nv[q] / norm


@numba.njit(cache=True)
def _backward(v, origin, h, cam, dirs, cosang, tau, nsamp, gmask, gnormal, gdepth, grad):
    lo, hi = _bounds(v, origin, h)
    s = np.empty(nsamp)
    phi = np.empty(nsamp)
    phic = np.empty(nsamp)
    alpha = np.zeros(nsamp)
    a_raw = np.zeros(nsamp)
    tmid = np.empty(nsamp)
    trans_before = np.empty(nsamp)
    work = np.empty((10, 3))
    for r in range(dirs.shape[0]):
        gm = gmask[r]
        gz = gdepth[r]
        gnx, gny, gnz = gnormal[r, 0], gnormal[r, 1], gnormal[r, 2]
        if gm == 0.0 and gz == 0.0 and gnx == 0.0 and gny == 0.0 and gnz == 0.0:
            continue
        d = dirs[r]
        t0, t1 = _ray_box(cam, d, lo, hi)
        if t1 <= t0:
            continue
        m, wsum, that, used = _composite(v, cam, d, t0, t1, nsamp, tau, origin, h, s, phi, phic, alpha,
                                         a_raw, tmid, trans_before)
        _ray_backward(v, cam, d, cosang[r], t0, t1, nsamp, tau, origin, h, phic, alpha, a_raw, tmid,
                      trans_before, wsum, that, used, gm, gnx, gny, gnz, gz, grad, work)


@numba.njit(cache=True)
def _fused(v, origin, h, cam, dirs, cosang, tau, nsamp, tmask, tnormal, nweight, mweight, tdepth, dweight,
           gscale, mask, normal, depth, grad):
    """Forward, per-pixel loss and backward in one pass.

    Loss per pixel: ``mweight * (m - tmask)^2 + nweight * (1 - n . tnormal)
    + dweight * (z - tdepth)^2``.  Returns the three weighted sums; the
    gradient of term ``k`` is scaled by ``gscale[k]`` before accumulation.
    """
    lo, hi = _bounds(v, origin, h)
    s = np.empty(nsamp)
    phi = np.empty(nsamp)
    phic = np.empty(nsamp)
    alpha = np.zeros(nsamp)
    a_raw = np.zeros(nsamp)
    tmid = np.empty(nsamp)
    trans_before = np.empty(nsamp)
    work = np.empty((10, 3))
    p = np.empty(3)
    nv = np.empty(3)
    lm = 0.0
    ln = 0.0
    ld = 0.0
    for r in range(dirs.shape[0]):
        d = dirs[r]
        m = 0.0
        z = 0.0
        n0 = 0.0
        n1 = 0.0
        n2 = 0.0
        t0, t1 = _ray_box(cam, d, lo, hi)
        hit = t1 > t0
        wsum = 0.0
        that = 0.0
        used = 0
        if hit:
            m, wsum, that, used = _composite(v, cam, d, t0, t1, nsamp, tau, origin, h, s, phi, phic, alpha,
                                             a_raw, tmid, trans_before)
            if wsum > WEIGHT_EPS:
                z = that * cosang[r]
                for q in range(3):
                    p[q] = cam[q] + that * d[q]
                norm = _normal_at(v, p, origin, h, nv, work[2], work[3], work[4], work[5])
                if norm > 1e-12:
                    n0 = nv[0] / norm
                    n1 = nv[1] / norm
                    n2 = nv[2] / norm
        mask[r] = m
        depth[r] = z
        normal[r, 0] = n0
        normal[r, 1] = n1
        normal[r, 2] = n2
        dm = m - tmask[r]
        lm += mweight * dm * dm
        nw = nweight[r]
        if nw != 0.0:
            ln += nw * (1.0 - (n0 * tnormal[r, 0] + n1 * tnormal[r, 1] + n2 * tnormal[r, 2]))
        dw = dweight[r]
        dz = z - tdepth[r]
        if dw != 0.0:
            ld += dw * dz * dz
        if hit:
            gn = gscale[1] * nw
            _ray_backward(v, cam, d, cosang[r], t0, t1, nsamp, tau, origin, h, phic, alpha, a_raw, tmid,
                          trans_before, wsum, that, used, 2.0 * gscale[0] * mweight * dm,
                          -gn * tnormal[r, 0], -gn * tnormal[r, 1], -gn * tnormal[r, 2],
                          2.0 * gscale[2] * dw * dz, grad, work)
    return lm, ln, ld


@dataclass
class SoftRender:
    mask: np.ndarray
    depth: np.ndarray
    normal: np.ndarray


@dataclass(frozen=True)
class RayBundle:
    """Precomputed per-pixel rays of one view."""

    cam: np.ndarray
    dirs: np.ndarray
    cosang: np.ndarray
    shape: tuple[int, int]

    @classmethod
    def from_view(cls, view: View) -> "RayBundle":
        d = view.ray_directions().reshape(-1, 3)
        return cls(np.ascontiguousarray(view.position), np.ascontiguousarray(d), d @ view.forward,
                   (view.height, view.width))


def _check(tau: float, samples_per_ray: int) -> None:
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    if samples_per_ray < 16:
        raise ParameterError(f"samples_per_ray must be >= 16, got {samples_per_ray}")


def soft_project_rays(values, origin, spacing, rays: RayBundle, tau: float, samples_per_ray: int) -> SoftRender:
    _check(tau, samples_per_ray)
    n = rays.dirs.shape[0]
    mask = np.empty(n)
    depth = np.empty(n)
    normal = np.empty((n, 3))
    _forward(np.ascontiguousarray(values, dtype=np.float64), np.asarray(origin, dtype=np.float64),
             float(spacing), rays.cam, rays.dirs, rays.cosang, float(tau), int(samples_per_ray),
             mask, depth, normal)
    hh, ww = rays.shape
    return SoftRender(mask.reshape(hh, ww), depth.reshape(hh, ww), normal.reshape(hh, ww, 3))


def soft_backward_rays(values, origin, spacing, rays: RayBundle, tau: float, samples_per_ray: int,
                       mask_cot=None, normal_cot=None, depth_cot=None, out=None) -> np.ndarray:
    _check(tau, samples_per_ray)
    n = rays.dirs.shape[0]
    values = np.ascontiguousarray(values, dtype=np.float64)

    def flat(x, shape):
        if x is None:
            return np.zeros(shape)
        x = np.asarray(x, dtype=np.float64)
        if x.size != int(np.prod(shape)):
            raise ParameterError(f"cotangent has {x.size} entries, expected {int(np.prod(shape))}")
        return np.ascontiguousarray(x.reshape(shape))

    grad = np.zeros(values.shape) if out is None else out
    _backward(values, np.asarray(origin, dtype=np.float64), float(spacing), rays.cam, rays.dirs, rays.cosang,
              float(tau), int(samples_per_ray), flat(mask_cot, (n,)), flat(normal_cot, (n, 3)),
              flat(depth_cot, (n,)), grad)
    return grad


def soft_project(grid: SdfGrid, view: View, tau: float, samples_per_ray: int = 64) -> SoftRender:
    """Soft mask, expected camera depth and unit normal images of ``grid`` seen from ``view``."""
    return soft_project_rays(grid.values, grid.origin, grid.spacing, RayBundle.from_view(view), tau, samples_per_ray)


def soft_project_backward(grid: SdfGrid, view: View, tau: float, samples_per_ray: int = 64,
                          mask_cot=None, normal_cot=None, depth_cot=None) -> np.ndarray:
    """Reverse-mode gradient of ``<mask, mask_cot> + <normal, normal_cot> + <depth, depth_cot>``
    with respect to every grid value; returns an array shaped like ``grid.values``."""
    return soft_backward_rays(grid.values, grid.origin, grid.spacing, RayBundle.from_view(view), tau,
                              samples_per_ray, mask_cot, normal_cot, depth_cot)


def fused_loss_grad(values, origin, spacing, rays: RayBundle, tau: float, samples_per_ray: int,
                    target_mask, target_normal, normal_weight, mask_weight: float,
                    target_depth=None, depth_weight=None, grad=None, grad_scale=(1.0, 1.0, 1.0)):
    """Render one view, evaluate the weighted per-pixel losses and accumulate their gradient.

    ``normal_weight`` and ``depth_weight`` are per-pixel arrays (0 disables a
    pixel); ``mask_weight`` is a scalar applied to every pixel.  Returns
    ``(SoftRender, (mask_sum, normal_sum, depth_sum), grad)``.  The gradient of
    each of the three terms is multiplied by the matching ``grad_scale`` entry,
    so callers can report unweighted terms while descending a weighted sum.
    """
    _check(tau, samples_per_ray)
    n = rays.dirs.shape[0]
    values = np.ascontiguousarray(values, dtype=np.float64)
    grad = np.zeros(values.shape) if grad is None else grad
    tm = np.ascontiguousarray(np.asarray(target_mask, dtype=np.float64).reshape(n))
    tn = np.ascontiguousarray(np.asarray(target_normal, dtype=np.float64).reshape(n, 3))
    nw = np.ascontiguousarray(np.asarray(normal_weight, dtype=np.float64).reshape(n))
    td = np.zeros(n) if target_depth is None else np.ascontiguousarray(np.asarray(target_depth, dtype=np.float64).reshape(n))
    dw = np.zeros(n) if depth_weight is None else np.ascontiguousarray(np.asarray(depth_weight, dtype=np.float64).reshape(n))
    mask = np.empty(n)
    normal = np.empty((n, 3))
    depth = np.empty(n)
    sums = _fused(values, np.asarray(origin, dtype=np.float64), float(spacing), rays.cam, rays.dirs, rays.cosang,
                  float(tau), int(samples_per_ray), tm, tn, nw, float(mask_weight), td, dw,
                  np.asarray(grad_scale, dtype=np.float64), mask, normal, depth, grad)
    hh, ww = rays.shape
    return SoftRender(mask.reshape(hh, ww), depth.reshape(hh, ww), normal.reshape(hh, ww, 3)), sums, grad
