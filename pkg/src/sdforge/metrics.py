"""Geometry and image metrics: alignment, Chamfer, volume IoU, F-score, PSNR, SSIM."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .errors import ParameterError
from .mesh import TriMesh, occupancy, padded_lattice, sample_surface, shape_bounds
from .sdf import SdfGrid

LUMA = (0.299, 0.587, 0.114)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class Alignment:
    """``p' = translation + pivot + scale * (p - pivot)`` with ``pivot`` the source box centre."""

    translation: tuple[float, float, float]
    scale: float
    pivot: tuple[float, float, float]

    def apply(self, p) -> np.ndarray:
        piv = np.asarray(self.pivot)
        return np.asarray(self.translation) + piv + self.scale * (np.asarray(p, dtype=np.float64) - piv)


def _box(mesh: TriMesh) -> tuple[np.ndarray, float]:
    if mesh.is_empty:
        raise ParameterError("mesh is empty")
    lo, hi = mesh.bounds()
    return 0.5 * (lo + hi), float(np.linalg.norm(hi - lo))


def align(pred: TriMesh, gt: TriMesh) -> tuple[TriMesh, Alignment]:
    """Move ``pred``'s bounding-box centre onto ``gt``'s and match box diagonals (no rotation)."""
    cp, dp = _box(pred)
    cg, dg = _box(gt)
    if dp <= 0 or dg <= 0:
        raise ParameterError("cannot align a mesh with zero bounding-box diagonal")
    a = Alignment(tuple(float(x) for x in cg - cp), dg / dp, tuple(float(x) for x in cp))
    return pred.replace(vertices=a.apply(pred.vertices)), a


def _nn_dist(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # the tree only picks the neighbour; distances use the plain formula so brute force agrees bit for bit
    _, idx = cKDTree(dst).query(src)
    return np.linalg.norm(src - dst[idx], axis=1)


def _points(obj, samples: int, seed: int) -> np.ndarray:
    if isinstance(obj, TriMesh):
        return sample_surface(obj, samples, seed)
    pts = np.asarray(obj, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ParameterError("point cloud is empty")
    return pts


def chamfer_points(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * (float(np.mean(_nn_dist(p, q))) + float(np.mean(_nn_dist(q, p))))


def chamfer(pred, gt, samples: int = 10000, seed: int = 0) -> float:
    """Symmetric mean nearest-neighbour distance (not squared).

    Both meshes are sampled with ``seed``; arrays are used as point clouds
    directly.
    """
    return chamfer_points(_points(pred, samples, seed), _points(gt, samples, seed))


def precision_recall(p: np.ndarray, q: np.ndarray, threshold: float) -> tuple[float, float]:
    prec = float(np.mean(_nn_dist(p, q) <= threshold))
    rec = float(np.mean(_nn_dist(q, p) <= threshold))
    return prec, rec


def f_score_points(p: np.ndarray, q: np.ndarray, threshold: float = 0.05) -> float:
    prec, rec = precision_recall(p, q, threshold)
    if prec + rec == 0:
        return 0.0
    return 100.0 * 2.0 * (prec * rec) / (prec + rec)


def f_score(pred, gt, threshold: float = 0.05, samples: int = 10000, seed: int = 0) -> float:
    """F-score in percent at distance ``threshold``."""
    if not threshold >= 0:
        raise ParameterError("threshold must be non-negative")
    return f_score_points(_points(pred, samples, seed), _points(gt, samples, seed), threshold)


def volume_iou(pred, gt, resolution: int = 128) -> float:
    """IoU of occupancies on a ``resolution``^3 lattice over the joint bounding box padded by 5%."""
    if resolution < 1:
        raise ParameterError("resolution must be >= 1")
    lo_a, hi_a = shape_bounds(pred)
    lo_b, hi_b = shape_bounds(gt)
    lat = padded_lattice(np.minimum(lo_a, lo_b), np.maximum(hi_a, hi_b), resolution)
    a = occupancy(pred, lattice=lat)
    b = occupancy(gt, lattice=lat)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give ``inf``."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    # via the RMSE so that round differences such as 0.1 give exact decibel values
    return -20.0 * math.log10(math.sqrt(mse))


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] >= 3:
        return LUMA[0] * img[..., 0] + LUMA[1] * img[..., 1] + LUMA[2] * img[..., 2]
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    raise ParameterError(f"unsupported image shape {img.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b) -> float:
    """Single-scale SSIM on luma, Gaussian 11x11 window, mean over valid window positions."""
    a, b = _check_pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ParameterError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    w = gaussian_window()

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, w.shape), w)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricConfig:
    samples: int = 10000
    seed: int = 0
    threshold: float = 0.05
    resolution: int = 128
    align: bool = True

    def __post_init__(self) -> None:
        if self.samples < 1 or self.resolution < 1 or self.threshold < 0:
            raise ParameterError("samples and resolution must be >= 1, threshold >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class GeomReport:
    chamfer: float
    volume_iou: float
    f_score: float
    threshold: float
    translation: tuple[float, float, float]
    scale: float
    samples: int
    seed: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.volume_iou <= 1.0 and 0.0 <= self.f_score <= 100.0 and self.chamfer >= 0.0):
            raise ParameterError("metric out of range")


@dataclass
class ImageReport:
    psnr: float
    ssim: float


def evaluate_geometry(pred, gt, cfg: MetricConfig | None = None) -> GeomReport:
    """Optional alignment, then Chamfer, volume IoU and F-score.

    ``pred`` and ``gt`` may be meshes or grids; grids are only accepted with
    ``align`` off and are sampled through their occupancy only.
    """
    cfg = cfg or MetricConfig()
    trans, scale = (0.0, 0.0, 0.0), 1.0
    if cfg.align:
        if not (isinstance(pred, TriMesh) and isinstance(gt, TriMesh)):
            raise ParameterError("alignment needs two meshes")
        pred, a = align(pred, gt)
        trans, scale = a.translation, a.scale
    if isinstance(pred, SdfGrid) or isinstance(gt, SdfGrid):
        raise ParameterError("Chamfer and F-score need meshes")
    p = sample_surface(pred, cfg.samples, cfg.seed)
    q = sample_surface(gt, cfg.samples, cfg.seed)
    return GeomReport(
        chamfer=chamfer_points(p, q),
        volume_iou=volume_iou(pred, gt, cfg.resolution),
        f_score=f_score_points(p, q, cfg.threshold),
        threshold=cfg.threshold,
        translation=tuple(trans),
        scale=float(scale),
        samples=cfg.samples,
        seed=cfg.seed,
    )


def evaluate_images(preds, gts) -> ImageReport:
    """Mean PSNR (finite values only; ``inf`` if all pairs are identical) and mean SSIM over image pairs."""
    ps, ss = [], []
    for a, b in zip(preds, gts):
        ps.append(psnr(a, b))
        ss.append(ssim(a, b))
    if not ps:
        raise ParameterError("no image pairs")
    finite = [p for p in ps if math.isfinite(p)]
    return ImageReport(float(np.mean(finite)) if finite else math.inf, float(np.mean(ss)))


CSV_FIELDS = ["object", "chamfer", "iou", "fscore", "psnr", "ssim", "seed", "samples", "config_hash"]


def _json_num(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else "nan"
    return x


def report_row(name: str, geom: GeomReport | None, img: ImageReport | None, cfg: MetricConfig) -> dict:
    return {
        "object": name,
        "chamfer": None if geom is None else geom.chamfer,
        "iou": None if geom is None else geom.volume_iou,
        "fscore": None if geom is None else geom.f_score,
        "psnr": None if img is None else img.psnr,
        "ssim": None if img is None else img.ssim,
        "seed": cfg.seed,
        "samples": cfg.samples,
        "config_hash": cfg.digest(),
    }


def write_reports(rows: list[dict], details: dict, out_dir) -> None:
    """Per-pair JSON files, ``summary.csv`` (one row per pair plus a median row) and ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for row in rows:
        payload = {k: _json_num(v) for k, v in row.items()}
        payload["detail"] = details.get(row["object"], {})
        (out / f"{row['object']}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    med = summary_medians(rows)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for row in rows + [med]:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in CSV_FIELDS})
    (out / "summary.json").write_text(json.dumps({k: _json_num(v) for k, v in med.items()}, indent=2) + "\n")


def summary_medians(rows: list[dict]) -> dict:
    med = {"object": "median"}
    for k in ("chamfer", "iou", "fscore", "psnr", "ssim"):
        vals = [r[k] for r in rows if r.get(k) is not None]
        med[k] = float(np.median(vals)) if vals else None
    if rows:
        for k in ("seed", "samples", "config_hash"):
            med[k] = rows[0][k]
    return med
