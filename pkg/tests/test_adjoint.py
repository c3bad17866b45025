import numpy as np
import pytest

from conftest import small_scene
from tsf import _kernels
from tsf.adjoint import ParamGradients, grad_params, gradient_check, loss_mse, volume_gradients
from tsf.domain import CaptureConfig, GridSpec, ParamMaps, SourceModel, TsfStack
from tsf.errors import InvalidArgumentError
from tsf.forward import extrude, simulate
from tsf.scenes import add_noise


def random_instance(rng, noise=0.05):
    """8x8x4 grid, 10 steps, random maps away from the truth."""
    grid, cap, src, truth = small_scene()
    measured = add_noise(simulate(truth, src, cap, grid), noise, rng)
    params = ParamMaps(truth.k * rng.uniform(0.5, 1.5, truth.shape),
                       truth.eps_prime * rng.uniform(0.5, 1.5, truth.shape))
    return grid, cap, src, params, measured


class TestLoss:
    def test_identical(self):
        grid, cap, src, p = small_scene()
        s = simulate(p, src, cap, grid)
        assert loss_mse(s, s).mse == 0.0

    def test_constant_offset(self):
        grid, cap, src, p = small_scene()
        s = simulate(p, src, cap, grid)
        t = TsfStack(s.frames + 2.0, cap, grid)
        rep = loss_mse(s, t)
        assert rep.mse == pytest.approx(4.0, rel=1e-12)
        assert len(rep.per_frame) == cap.n_frames - 1

    def test_normalized_mode(self):
        grid, cap, src, p = small_scene()
        s = simulate(p, src, cap, grid)
        t = TsfStack(s.frames + 2.0, cap, grid)
        peak = np.abs(s.rise).max()
        assert loss_mse(t, s, mode="normalized").mse == pytest.approx(4.0 / peak**2, rel=1e-12)

    def test_mismatched_configs(self):
        grid, cap, src, p = small_scene()
        s = simulate(p, src, cap, grid)
        grid2, cap2, _, p2 = small_scene(frame_dt=0.5, n_frames=11)
        with pytest.raises(InvalidArgumentError):
            loss_mse(s, simulate(p2, src, cap2, grid2))


class TestGradients:
    def test_zero_at_exact_fit(self):
        grid, cap, src, p = small_scene()
        rep, g = grad_params(p, src, cap, grid, simulate(p, src, cap, grid))
        assert rep.mse == 0.0
        np.testing.assert_array_equal(g.d_k, 0.0)
        np.testing.assert_array_equal(g.d_eps_prime, 0.0)

    def test_locality_of_absorption_gradient(self, rng):
        # a narrow beam at x = 0: exp underflows to exactly 0 beyond ~12 px
        cap = CaptureConfig(1.0, 0.25, 9, 300.0)
        grid = GridSpec.for_capture(24, 3, 3, 5e-4, 0.25, cap)
        src = SourceModel(1.0, 0.0, 1.0, 0.3, 1.0)
        f_s = src.spatial(grid.surface_shape)
        assert np.any(f_s == 0)
        p = ParamMaps.uniform(grid, 1e-7, 0.0)
        measured = TsfStack(300.0 + rng.random((cap.n_frames,) + grid.surface_shape), cap, grid)
        _, g = grad_params(p, src, cap, grid, measured)
        np.testing.assert_array_equal(g.d_eps_prime[f_s == 0], 0.0)
        assert np.any(g.d_eps_prime[f_s > 0] != 0)

    def test_no_coupling_at_ambient(self):
        cap = CaptureConfig(1.0, 0.25, 9, 300.0)
        grid = GridSpec.for_capture(24, 3, 3, 5e-4, 0.25, cap)
        src = SourceModel(1.0, 0.0, 1.0, 0.3, 1.0)
        p = ParamMaps.uniform(grid, 1e-7, 0.0)
        measured = TsfStack(np.full((cap.n_frames,) + grid.surface_shape, 300.0), cap, grid)
        _, g = grad_params(p, src, cap, grid, measured)
        np.testing.assert_array_equal(g.d_eps_prime[src.spatial(grid.surface_shape) == 0], 0.0)

    @pytest.mark.parametrize("mode", ["kelvin", "normalized"])
    def test_matches_finite_differences(self, rng, mode):
        grid, cap, src, params, measured = random_instance(rng)
        rep = gradient_check(params, src, cap, grid, measured, n_probes=32, rel_tol=1e-4, mode=mode)
        assert rep.n_probes == 64
        assert rep.passed, rep.max_rel_err
        assert rep.max_rel_err <= 1e-4

    def test_zero_gradient_point_uses_absolute_fallback(self):
        grid, cap, src, p = small_scene()
        rep = gradient_check(p, src, cap, grid, simulate(p, src, cap, grid), n_probes=8)
        assert rep.passed

    def test_sign_flip_is_caught(self, rng):
        grid, cap, src, params, measured = random_instance(rng)

        def flipped(*args, **kw):
            rep, g = grad_params(*args, **kw)
            return rep, ParamGradients(-g.d_k, -g.d_eps_prime)

        rep = gradient_check(params, src, cap, grid, measured, n_probes=8, grad_fn=flipped)
        assert not rep.passed
        assert rep.max_rel_err > 1.0

    def test_checkpointing_matches_full_storage(self, rng):
        grid, cap, src, params, measured = random_instance(rng)
        _, full = grad_params(params, src, cap, grid, measured)
        _, ckpt = grad_params(params, src, cap, grid, measured, memory_budget=1)
        np.testing.assert_allclose(ckpt.d_k, full.d_k, rtol=1e-13, atol=0)
        np.testing.assert_allclose(ckpt.d_eps_prime, full.d_eps_prime, rtol=1e-13, atol=0)

    def test_substeps_between_frames(self, rng):
        grid, cap, src, truth = small_scene(dt=0.125, frame_dt=0.25, n_frames=6)
        measured = add_noise(simulate(truth, src, cap, grid), 0.05, rng)
        params = ParamMaps(truth.k * 1.2, truth.eps_prime * 0.8)
        assert gradient_check(params, src, cap, grid, measured, n_probes=8).passed

    def test_identifiable_minimum(self):
        grid, cap, src, truth = small_scene()
        measured = simulate(truth, src, cap, grid)
        start = ParamMaps.uniform(grid, 0.5 * truth.k.max(), 0.5 * truth.eps_prime.max())
        _, g0 = grad_params(start, src, cap, grid, measured)
        _, g = grad_params(truth, src, cap, grid, measured)
        assert np.abs(g.d_k).max() <= 1e-8 * np.abs(g0.d_k).max()
        assert np.abs(g.d_eps_prime).max() <= 1e-8 * np.abs(g0.d_eps_prime).max()


def _step_matrix(k_vol, grid):
    n = k_vol.size
    A = np.empty((n, n))
    out = np.empty(grid.shape)
    zero = np.zeros(grid.surface_shape)
    c = (1 / grid.dx**2, 1 / grid.dy**2, 1 / grid.dz**2)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        _kernels.ftcs_step(e.reshape(grid.shape), k_vol, zero, grid.dt, *c, out)
        A[:, j] = out.ravel()
    return A


def _adjoint_matrix(k_vol, grid):
    n = k_vol.size
    B = np.empty((n, n))
    out = np.empty(grid.shape)
    dk = np.zeros(grid.shape)
    u = np.zeros(grid.shape)
    c = (1 / grid.dx**2, 1 / grid.dy**2, 1 / grid.dz**2)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        _kernels.adjoint_step(e.reshape(grid.shape), u, k_vol, grid.dt, *c, out, dk)
        B[:, j] = out.ravel()
    return B


class TestTranspose:
    grid = GridSpec(4, 4, 2, 5e-4, 5e-4, 5e-4, 0.25, 1)

    def test_constant_k_step_is_symmetric(self):
        k = np.full(self.grid.shape, 1.069e-7)
        A = _step_matrix(k, self.grid)
        np.testing.assert_allclose(A, A.T, rtol=0, atol=1e-15)
        np.testing.assert_allclose(_adjoint_matrix(k, self.grid), A.T, rtol=0, atol=1e-15)

    def test_variable_k_adjoint_is_transpose(self, rng):
        k = rng.uniform(0.5e-7, 1.5e-7, self.grid.shape)
        A = _step_matrix(k, self.grid)
        np.testing.assert_allclose(_adjoint_matrix(k, self.grid), A.T, rtol=0, atol=1e-15)

    def test_volume_gradient_dot_product(self, rng):
        # <dJ/dk_vol, dk> against a directional central difference
        grid, cap, src, truth = small_scene()
        measured = add_noise(simulate(truth, src, cap, grid), 0.05, rng)
        k = extrude(truth.k, grid) * rng.uniform(0.8, 1.2, grid.shape)
        direction = rng.normal(size=grid.shape) * 1e-9
        pf, _, dk, _ = volume_gradients(k, truth.eps_prime, src, cap, grid, measured.frames)
        h = 1e-2
        jp = volume_gradients(k + h * direction, truth.eps_prime, src, cap, grid, measured.frames)[0].mean()
        jm = volume_gradients(k - h * direction, truth.eps_prime, src, cap, grid, measured.frames)[0].mean()
        assert (jp - jm) / (2 * h) == pytest.approx(np.sum(dk * direction), rel=1e-6)
