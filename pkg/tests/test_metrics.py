import csv
import json
import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from sdforge.errors import ParameterError
from sdforge.mesh import TriMesh, box_mesh, empty_mesh, icosphere
from sdforge.metrics import (
    CSV_FIELDS,
    GeomReport,
    MetricConfig,
    align,
    chamfer,
    evaluate_geometry,
    evaluate_images,
    f_score,
    f_score_points,
    precision_recall,
    psnr,
    report_row,
    ssim,
    to_gray,
    volume_iou,
    write_reports,
)
from sdforge.sdf import grid_from_function


def brute_nn(p, q):
    return np.array([min(math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y))) for y in q) for x in p])


def brute_chamfer(p, q):
    return 0.5 * (float(np.mean(brute_nn(p, q))) + float(np.mean(brute_nn(q, p))))


def naive_ssim(x, y):
    g = [math.exp(-((i - 5) ** 2) / (2 * 1.5**2)) for i in range(11)]
    w = [[a * b for b in g] for a in g]
    tot = sum(map(sum, w))
    w = [[v / tot for v in row] for row in w]
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for r in range(x.shape[0] - 10):
        for c in range(x.shape[1] - 10):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(11):
                for j in range(11):
                    a, b, k = x[r + i, c + j], y[r + i, c + j], w[i][j]
                    mx += k * a
                    my += k * b
                    sxx += k * a * a
                    syy += k * b * b
                    sxy += k * a * b
            sxx -= mx * mx
            syy -= my * my
            sxy -= mx * my
            vals.append((2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return sum(vals) / len(vals)


def square(z):
    return TriMesh([[0, 0, z], [1, 0, z], [1, 1, z], [0, 1, z]], [[0, 1, 2], [0, 2, 3]])


class TestAlign:
    def test_identity(self):
        m = icosphere(0.5, 2)
        out, a = align(m, m)
        npt.assert_allclose(a.translation, 0.0, atol=1e-12)
        assert a.scale == pytest.approx(1.0, abs=1e-12)
        npt.assert_allclose(out.vertices, m.vertices, atol=1e-12)

    def test_translation(self):
        gt = icosphere(0.5, 2)
        pred = gt.replace(vertices=gt.vertices + [1.0, 0.0, 0.0])
        out, a = align(pred, gt)
        npt.assert_allclose(a.translation, [-1.0, 0.0, 0.0], atol=1e-9)
        npt.assert_allclose(out.vertices, gt.vertices, atol=1e-9)

    def test_scale(self):
        gt = icosphere(0.5, 2, center=(0.2, -0.1, 0.3))
        pred = gt.replace(vertices=gt.vertices * 2.0)
        out, a = align(pred, gt)
        assert a.scale == pytest.approx(0.5, abs=1e-9)
        npt.assert_allclose(out.vertices, gt.vertices, atol=1e-9)

    def test_degenerate(self):
        pt = TriMesh([[0, 0, 0], [0, 0, 0], [0, 0, 0]], np.zeros((0, 3), dtype=np.int64))
        with pytest.raises(ParameterError):
            align(icosphere(0.5, 1), empty_mesh())
        with pytest.raises(ParameterError):
            align(pt.replace(faces=np.zeros((0, 3), dtype=np.int64)), icosphere(0.5, 1))


class TestChamfer:
    def test_identical(self):
        m = icosphere(0.5, 2)
        assert chamfer(m, m, samples=2000, seed=4) == 0.0

    def test_parallel_squares(self):
        d = 0.1
        assert chamfer(square(0.0), square(d), samples=20000, seed=1) == pytest.approx(d, rel=0.02)

    def test_brute_force_100(self):
        rng = np.random.default_rng(0)
        p, q = rng.normal(size=(2, 100, 3))
        assert chamfer(p, q) == brute_chamfer(p, q)

    def test_empty(self):
        with pytest.raises(ParameterError):
            chamfer(empty_mesh(), icosphere(0.5, 1))

    @given(st.integers(0, 2**31 - 1))
    def test_symmetric(self, seed):
        a = icosphere(0.5, 1)
        b = box_mesh((-0.3, -0.3, -0.3), (0.4, 0.5, 0.3))
        assert chamfer(a, b, samples=500, seed=seed) == chamfer(b, a, samples=500, seed=seed)

    def test_monotone_under_interpolation(self):
        gt = icosphere(0.5, 2)
        rng = np.random.default_rng(1)
        start = gt.vertices + rng.normal(scale=0.1, size=gt.vertices.shape)
        vals = []
        for t in np.linspace(0.0, 0.8, 5):
            pred = gt.replace(vertices=(1 - t) * start + t * gt.vertices)
            vals.append(chamfer(pred, gt, samples=4000, seed=2))
        assert all(b < a for a, b in zip(vals, vals[1:]))


class TestFScore:
    def test_identical_and_far(self):
        m = icosphere(0.5, 2)
        assert f_score(m, m, samples=1000) == 100.0
        far = icosphere(0.5, 2, center=(5.0, 0.0, 0.0))
        assert f_score(m, far, samples=1000) == 0.0

    def test_brute_force_50(self):
        rng = np.random.default_rng(2)
        p, q = rng.uniform(size=(2, 50, 3))
        thr = 0.2
        dp, dq = brute_nn(p, q), brute_nn(q, p)
        prec, rec = float(np.mean(dp <= thr)), float(np.mean(dq <= thr))
        assert precision_recall(p, q, thr) == (prec, rec)
        assert f_score_points(p, q, thr) == 100.0 * 2 * (prec * rec) / (prec + rec)
        assert f_score(p, q, thr) == f_score_points(p, q, thr)

    def test_large_threshold(self):
        a = icosphere(0.5, 1)
        b = box_mesh((0.0, 0.0, 0.0), (2.0, 1.0, 1.0))
        assert f_score(a, b, threshold=10.0, samples=500) == 100.0

    @given(st.integers(0, 1000), st.floats(0.0, 0.5))
    def test_symmetric(self, seed, thr):
        a = icosphere(0.5, 1)
        b = box_mesh((-0.3, -0.3, -0.3), (0.4, 0.5, 0.3))
        assert f_score(a, b, thr, 300, seed) == f_score(b, a, thr, 300, seed)


class TestVolumeIoU:
    def test_identical_and_disjoint(self):
        a = box_mesh((0, 0, 0), (1, 1, 1))
        assert volume_iou(a, a) == 1.0
        assert volume_iou(a, box_mesh((2, 0, 0), (3, 1, 1))) == 0.0

    def test_half_overlap(self):
        iou = volume_iou(box_mesh((0, 0, 0), (1, 1, 1)), box_mesh((0.5, 0, 0), (1.5, 1, 1)), 128)
        assert iou == pytest.approx(1 / 3, abs=0.01)

    def test_grid_vs_mesh(self):
        g = grid_from_function(lambda p: np.linalg.norm(p, axis=-1) - 0.5, 64, 2.0)
        assert volume_iou(g, icosphere(0.5, 4), 64) > 0.95

    def test_rigid_invariance(self):
        a = box_mesh((0, 0, 0), (1, 1, 1))
        b = icosphere(0.6, 3, center=(0.8, 0.5, 0.5))
        base = volume_iou(a, b)
        ang = 0.4
        r = np.array([[math.cos(ang), -math.sin(ang), 0], [math.sin(ang), math.cos(ang), 0], [0, 0, 1]])
        move = lambda m: m.replace(vertices=m.vertices @ r.T + [0.3, -1.2, 2.0])  # noqa: E731
        assert abs(volume_iou(move(a), move(b)) - base) <= 0.01


class TestImages:
    def test_psnr_cases(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0.1, 0.9, size=(16, 16, 3))
        assert psnr(a, a) == math.inf
        assert psnr(a, a + 0.1) == 20.0
        b = rng.uniform(size=(16, 16, 3))
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), rel=1e-12)
        with pytest.raises(ParameterError):
            psnr(a, a[:8])

    def test_ssim_identity_and_negative(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(32, 32))
        assert abs(ssim(a, a) - 1.0) <= 1e-9
        board = (np.indices((32, 32)).sum(axis=0) % 2).astype(float)
        assert ssim(board, 1.0 - board) < 0

    def test_ssim_direct_formula(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(32, 32))
        b = np.clip(a + rng.normal(scale=0.1, size=(32, 32)), 0, 1)
        assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-12)

    def test_ssim_matches_reference_library(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(size=(40, 48, 3))
        b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0, 1)
        ref = structural_similarity(to_gray(a), to_gray(b), gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0)
        assert ssim(a, b) == pytest.approx(ref, abs=1e-9)

    def test_ssim_small_image(self):
        with pytest.raises(ParameterError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_luma(self):
        npt.assert_allclose(to_gray(np.ones((2, 2, 3)) * [1.0, 0.0, 0.0]), 0.299)

    def test_evaluate_images(self):
        a = np.full((16, 16, 3), 0.5)
        rep = evaluate_images([a, a], [a, a + 0.1])
        assert rep.psnr == 20.0 and rep.ssim <= 1.0


class TestReports:
    def test_ranges_validated(self):
        with pytest.raises(ParameterError):
            GeomReport(0.1, 1.5, 50.0, 0.05, (0, 0, 0), 1.0, 10, 0)

    def test_evaluate_geometry_and_files(self, tmp_path):
        gt = icosphere(0.5, 3)
        pred = gt.replace(vertices=gt.vertices * 1.1 + 0.2)
        cfg = MetricConfig(samples=2000)
        rep = evaluate_geometry(pred, gt, cfg)
        assert rep.scale == pytest.approx(1 / 1.1)
        assert rep.chamfer < 1e-2 and rep.volume_iou > 0.98 and rep.f_score > 99.0
        raw = evaluate_geometry(pred, gt, MetricConfig(samples=2000, align=False))
        assert raw.volume_iou < rep.volume_iou
        rows = [report_row("a", rep, None, cfg), report_row("b", raw, None, cfg)]
        write_reports(rows, {"a": {"note": 1}}, tmp_path)
        with open(tmp_path / "summary.csv") as fh:
            table = list(csv.DictReader(fh))
        assert list(table[0].keys()) == CSV_FIELDS
        assert [r["object"] for r in table] == ["a", "b", "median"]
        assert float(table[2]["iou"]) == pytest.approx(np.median([rep.volume_iou, raw.volume_iou]))
        per = json.loads((tmp_path / "a.json").read_text())
        assert per["detail"] == {"note": 1} and per["config_hash"] == cfg.digest()

    def test_config_hash_changes(self):
        assert MetricConfig().digest() != MetricConfig(seed=1).digest()
