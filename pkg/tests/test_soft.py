import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from sdforge.camera import View, make_rig
from sdforge.errors import ParameterError
from sdforge.generator import BlockSpec, GenConfig, block_sdf, generate
from sdforge.sdf import SdfGrid, grid_from_function
from sdforge.soft import soft_project, soft_project_backward

from gradcheck import fd_gradient_errors

RIG = make_rig(2.7, 32)


def sphere_grid(n=32, r=0.5):
    return grid_from_function(lambda p: np.linalg.norm(p, axis=-1) - r, n, 2.0)


class TestForward:
    def test_rejects_bad_parameters(self):
        g = sphere_grid(16)
        with pytest.raises(ParameterError):
            soft_project(g, RIG[0], 0.0, 32)
        with pytest.raises(ParameterError):
            soft_project(g, RIG[0], 0.1, 8)

    @pytest.mark.parametrize("tau", [0.05, 0.1, 0.3])
    def test_empty_scene_bound(self, tau):
        g = grid_from_function(lambda p: np.linalg.norm(p, axis=-1) + 0.2, 32, 2.0)
        m = soft_project(g, RIG[0], tau, 64).mask
        assert m.max() <= 1.0 / (1.0 + math.exp(g.values.min() / tau)) + 1e-9

    def test_empty_scene_limit(self):
        g = SdfGrid(np.full((16, 16, 16), 1.0), (-1, -1, -1), 2.0 / 15)
        assert soft_project(g, RIG[1], 0.01, 32).mask.max() < 1e-12

    def test_box_silhouette(self):
        box = BlockSpec((0.8, 0.6, 0.4), (0.0, 0.0, 0.0))
        g = grid_from_function(lambda p: block_sdf(box, p), 64, 2.0)
        v = View(0.0, 0.0, 3.0, width=64, height=64)
        m = soft_project(g, v, 0.005, 256).mask
        # analytic silhouette: pixels whose ray hits the box (slab test)
        d = v.ray_directions()
        hi = np.array([0.4, 0.3, 0.2])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1, t2 = (-hi - v.position) / d, (hi - v.position) / d
        sil = np.nanmax(np.minimum(t1, t2), -1) <= np.nanmin(np.maximum(t1, t2), -1)
        band = ndimage.binary_dilation(sil, iterations=2) & ~ndimage.binary_erosion(sil, iterations=2)
        assert np.abs(m - sil)[~band].max() <= 0.05

    def test_sample_count_self_convergence(self):
        g = sphere_grid(32)
        a = soft_project(g, RIG[0], 0.06, 64).mask
        b = soft_project(g, RIG[0], 0.06, 128).mask
        assert np.abs(a - b).max() <= 0.01

    def test_normals_unit_and_outward(self):
        g = sphere_grid(32)
        v = RIG[2]
        r = soft_project(g, v, 0.03, 64)
        fg = r.mask > 0.5
        npt.assert_allclose(np.linalg.norm(r.normal[fg], axis=-1), 1.0, atol=1e-6)
        # sphere normals point back toward the camera side
        assert np.all(r.normal[fg] @ v.forward < 0)

    def test_depth_of_sphere_front(self):
        g = sphere_grid(64)
        v = View(0.0, 0.0, 2.7, width=33, height=33)
        r = soft_project(g, v, 0.01, 128)
        assert r.depth[16, 16] == pytest.approx(2.7 - 0.5, abs=2.0 / 64)

    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0))
    def test_mask_in_unit_interval(self, seed, tau):
        rng = np.random.default_rng(seed)
        g = SdfGrid(rng.normal(scale=0.5, size=(12, 12, 12)), (-0.8, -0.8, -0.8), 1.6 / 11)
        r = soft_project(g, RIG[seed % 6], tau, 16)
        assert np.all((r.mask >= 0) & (r.mask <= 1))
        assert np.all(np.isfinite(r.depth)) and np.all(np.isfinite(r.normal))

    def test_deterministic(self):
        g = generate(GenConfig(seed=1, grid_dims=32)).grid
        a = soft_project(g, RIG[3], 0.05, 48)
        b = soft_project(g, RIG[3], 0.05, 48)
        assert a.mask.tobytes() == b.mask.tobytes() and a.normal.tobytes() == b.normal.tobytes()


class TestRigSymmetry:
    def test_lattice_symmetric_pairs_agree(self):
        # x -> -x maps azimuth a to 180 - a: views 0<->2 and 3<->5, views 1 and 4 map to themselves
        g = sphere_grid(32)
        rig = make_rig(2.7, 64)
        m = [soft_project(g, v, 0.05, 64).mask for v in rig]
        assert np.abs(m[0] - m[2][:, ::-1]).max() <= 1e-6
        assert np.abs(m[3] - m[5][:, ::-1]).max() <= 1e-6
        assert np.abs(m[1] - m[1][:, ::-1]).max() <= 1e-6
        assert np.abs(m[4] - m[4][:, ::-1]).max() <= 1e-6

    def test_all_views_close(self):
        # other pairs differ only by lattice anisotropy of the sampled sphere
        g = sphere_grid(64)
        m = [soft_project(g, v, 0.05, 64).mask for v in make_rig(2.7, 64)]
        assert max(np.abs(a - b).max() for a in m for b in m) <= 0.01


class TestBackward:
    def test_zero_cotangent(self):
        g = sphere_grid(16)
        grad = soft_project_backward(g, RIG[0], 0.1, 32, mask_cot=np.zeros((32, 32)))
        npt.assert_array_equal(grad, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            soft_project_backward(sphere_grid(16), RIG[0], 0.1, 32, mask_cot=np.zeros((8, 8)))

    def test_single_pixel_sparsity(self):
        g = sphere_grid(16)
        v = RIG[0]
        cot = np.zeros((32, 32))
        cot[14, 17] = 1.0
        grad = soft_project_backward(g, v, 0.1, 32, mask_cot=cot)
        nz = np.argwhere(grad != 0)
        assert len(nz) > 0
        d = v.ray_directions()[14, 17]
        c = g.centers()[tuple(nz.T)] - v.position
        dist = np.linalg.norm(c - np.outer(c @ d, d), axis=1)
        # trilinear stencil plus a central-difference neighbour reaches two voxels from a sample
        assert dist.max() <= 2.0 * math.sqrt(3) * g.spacing

    def test_normal_only_cotangent_leaves_other_pixels(self):
        g = sphere_grid(16)
        cot = np.zeros((32, 32, 3))
        grad = soft_project_backward(g, RIG[1], 0.1, 32, normal_cot=cot)
        npt.assert_array_equal(grad, 0.0)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_mask_fd(self, seed):
        rng = np.random.default_rng(seed)
        g = generate(GenConfig(seed=seed, grid_dims=32)).grid
        view = make_rig(2.7, 32)[seed]
        errs, kinks = fd_gradient_errors(g, view, 2 * g.spacing, 32, "mask", 10, rng)
        assert len(errs) == 10 and kinks <= 5
        assert max(errs) <= 1e-3

    @pytest.mark.parametrize("seed", [2, 3])
    def test_normal_fd(self, seed):
        rng = np.random.default_rng(seed)
        g = generate(GenConfig(seed=seed, grid_dims=32)).grid
        view = make_rig(2.7, 32)[seed]
        errs, kinks = fd_gradient_errors(g, view, 2 * g.spacing, 32, "normal", 10, rng)
        assert len(errs) == 10 and kinks <= 5
        assert max(errs) <= 5e-3
