import json
import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdforge.camera import (
    View,
    ViewImages,
    ViewSet,
    load_viewset,
    make_rig,
    read_raw_image,
    save_viewset,
    write_raw_image,
)
from sdforge.errors import FormatError, ParameterError
from sdforge.mesh import empty_mesh, icosphere
from sdforge.raster import rasterize_mesh, render_views


class TestView:
    @given(st.floats(-720, 720), st.floats(-80, 80), st.floats(0.5, 10))
    def test_rigid_and_looks_at_origin(self, az, el, dist):
        v = View(az, el, dist)
        r = v.rotation
        npt.assert_allclose(r @ r.T, np.eye(3), atol=1e-9)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)
        npt.assert_allclose(v.to_camera([0.0, 0.0, 0.0]), [0.0, 0.0, dist], atol=1e-9)

    def test_projection_centre_and_up(self):
        v = View(0.0, 0.0, 3.0, width=64, height=64)
        s, z = v.project([0.0, 0.0, 0.0])
        npt.assert_allclose(s, [32.0, 32.0], atol=1e-9)
        assert z == pytest.approx(3.0)
        s_up, _ = v.project([0.0, 0.0, 0.5])
        assert s_up[1] < 32.0  # world up is image up

    def test_ray_through_projection(self):
        v = View(40.0, 15.0, 2.5, width=48, height=40)
        d = v.ray_directions()
        p = v.position + 2.0 * d[7, 31]
        s, _ = v.project(p)
        npt.assert_allclose(s, [31.5, 7.5], atol=1e-9)

    @pytest.mark.parametrize("kw", [{"distance": 0.0}, {"fov_y": 0.0}, {"fov_y": 180.0}, {"width": 0}])
    def test_rejects(self, kw):
        args = {"azimuth": 0.0, "elevation": 0.0, "distance": 1.0} | kw
        with pytest.raises(ParameterError):
            View(**args)

    def test_dict_roundtrip(self):
        v = View(30.0, 20.0, 2.7, 40.0, 96, 80)
        assert View.from_dict(json.loads(json.dumps(v.to_dict()))) == v


class TestRig:
    def test_layout(self):
        rig = make_rig(2.7)
        assert (rig[0].azimuth, rig[0].elevation) == (30.0, 20.0)
        assert rig[3].azimuth - rig[0].azimuth == 180.0
        assert [v.elevation for v in rig] == [20.0, -10.0] * 3
        assert [v.azimuth for v in rig] == [30.0 + 60.0 * i for i in range(6)]
        dists = [np.linalg.norm(v.position) for v in rig]
        npt.assert_allclose(dists, 2.7, rtol=0, atol=1e-9)

    @pytest.mark.parametrize("args", [(0.0,), (-1.0,), (2.7, 16), (2.7, 64, 0.0)])
    def test_rejects(self, args):
        with pytest.raises(ParameterError):
            make_rig(*args)

    def test_viewset_requires_six(self):
        with pytest.raises(ParameterError):
            ViewSet([ViewImages(v) for v in make_rig(2.7)[:5]])
        vs = ViewSet([ViewImages(v) for v in make_rig(2.7)])
        assert vs.is_standard_rig()


class TestRaster:
    def test_sphere_coverage_matches_disk(self):
        r, d = 0.5, 2.7
        sphere = icosphere(r, 5)
        for v in make_rig(d, 256):
            ras = rasterize_mesh(sphere, v)
            ang = math.asin(r / d)
            radius_px = v.focal * math.tan(ang)
            expected = math.pi * radius_px**2 / (v.width * v.height)
            assert ras.mask.mean() == pytest.approx(expected, rel=0.02)

    def test_depth_at_centre(self):
        r, d = 0.5, 2.7
        v = View(0.0, 0.0, d, width=129, height=129)
        ras = rasterize_mesh(icosphere(r, 5), v)
        rows, cols = np.nonzero(ras.mask)
        rc, cc = int(round(rows.mean())), int(round(cols.mean()))
        assert ras.depth[rc, cc] == pytest.approx(d - r, abs=2.0 / 64)

    def test_normals_unit_and_facing_camera(self):
        v = make_rig(2.7, 64)[1]
        ras = rasterize_mesh(icosphere(0.6, 3), v)
        hit = ras.mask > 0
        n = ras.normal[hit]
        npt.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-9)
        to_cam = v.position - ras.position[hit]
        assert np.all(np.einsum("pd,pd->p", n, to_cam) > 0)
        npt.assert_array_equal(ras.normal[~hit], 0.0)

    def test_behind_camera_is_background(self):
        v = View(0.0, 0.0, 2.0)
        behind = icosphere(0.3, 2, center=2.0 * v.position)
        ras = rasterize_mesh(behind, v)
        assert ras.mask.sum() == 0 and np.all(ras.tri_id == -1)

    def test_empty_mesh(self):
        ras = rasterize_mesh(empty_mesh(), View(0.0, 0.0, 2.0))
        assert ras.mask.sum() == 0

    def test_colors_interpolated(self):
        m = icosphere(0.5, 2)
        m = m.replace(colors=np.tile([0.2, 0.4, 0.6], (len(m.vertices), 1)))
        ras = rasterize_mesh(m, View(10.0, 5.0, 2.0))
        npt.assert_allclose(ras.color[ras.mask > 0], np.tile([0.2, 0.4, 0.6], (int(ras.mask.sum()), 1)), atol=1e-12)

    def test_deterministic(self):
        m = icosphere(0.5, 3)
        v = make_rig(2.7, 64)[4]
        a, b = rasterize_mesh(m, v), rasterize_mesh(m, v)
        for x, y in [(a.mask, b.mask), (a.depth, b.depth), (a.normal, b.normal)]:
            assert x.tobytes() == y.tobytes()


class TestViewIO:
    def test_roundtrip(self, tmp_path):
        m = icosphere(0.5, 3)
        m = m.replace(colors=(m.vertices + 1) / 2)
        views = render_views(m, make_rig(2.7, 64))
        save_viewset(views, tmp_path)
        back = load_viewset(tmp_path)
        assert back.is_standard_rig()
        for a, b in zip(views, back):
            npt.assert_array_equal(b.mask, a.mask)
            inside = b.mask > 0.5
            npt.assert_allclose(np.linalg.norm(b.normal[inside], axis=-1), 1.0, atol=1e-3)
            assert np.max(np.abs(b.normal[inside] - a.normal[inside])) < 0.02
            assert np.max(np.abs(b.depth - a.depth)) < 1e-4
            assert np.max(np.abs(b.color - a.color)) <= 0.5 / 255 + 1e-12

    def test_missing_directory_named(self, tmp_path):
        views = render_views(icosphere(0.5, 2), make_rig(2.7, 32))
        save_viewset(views, tmp_path, kinds=("mask",))
        with pytest.raises(FileNotFoundError, match="normal"):
            load_viewset(tmp_path)

    def test_raw_image_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(7, 5, 3)).astype(np.float32)
        write_raw_image(img, tmp_path / "a.raw")
        npt.assert_array_equal(read_raw_image(tmp_path / "a.raw"), img)
        (tmp_path / "b.raw").write_bytes(b"JUNK" + (tmp_path / "a.raw").read_bytes()[4:])
        with pytest.raises(FormatError):
            read_raw_image(tmp_path / "b.raw")
