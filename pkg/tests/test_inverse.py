import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_scene
from tsf.adjoint import loss_mse
from tsf.domain import ParamMaps, TsfStack
from tsf.errors import InvalidArgumentError, StabilityError
from tsf.forward import simulate, simulate_volume
from tsf.inverse import (Adam, OptimConfig, beam_core, beam_roi, detect_metal, lr_schedule, recover,
                         recover_two_layer)

K = 1.069e-7
CFG = OptimConfig(epochs=400, k_bounds=(1e-9, 1.6e-7), roi_radius=100.0)


def scene(**kw):
    args = dict(nx=16, ny=16, nz=8, n_frames=41, t_on=5.0, sigma_px=2.0, eps=2.0, k=K)
    args.update(kw)
    return small_scene(**args)


@pytest.fixture(scope="module")
def fitted():
    grid, cap, src, p = scene()
    measured = simulate(p, src, cap, grid)
    return grid, cap, src, p, measured, recover(measured, src, grid, CFG)


def window_means(history, w=50):
    h = np.array([r.mse for r in history])
    return np.array([h[i:i + w].mean() for i in range(0, len(h) - w + 1, w)])


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 0.01), (99, 0.01), (100, 0.005), (399, 0.00125)])
    def test_step_decay(self, epoch, lr):
        cfg = OptimConfig(lr0=0.01, lr_decay=0.5, decay_every=100)
        assert lr_schedule(cfg, epoch) == pytest.approx(lr, rel=1e-15)

    def test_negative_epoch(self):
        with pytest.raises(InvalidArgumentError):
            lr_schedule(OptimConfig(), -1)

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(lr_decay=0.0), dict(k_bounds=(2e-7, 1e-7)),
                                    dict(eps_bounds=(-1.0, 1.0)), dict(loss_mode="l1")])
    def test_config_validation(self, kw):
        with pytest.raises(InvalidArgumentError):
            OptimConfig(**kw)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = {"a": np.array([1.0, 1.0])}
        Adam().step(p, {"a": np.array([3.0, -0.5])}, 0.1)
        np.testing.assert_allclose(p["a"], [0.9, 1.1], rtol=1e-6)

    def test_minimizes_quadratic(self):
        p = {"a": np.array([5.0])}
        opt = Adam(0.9, 0.9)
        for _ in range(500):
            opt.step(p, {"a": 2 * (p["a"] - 2.0)}, 0.05)
        assert p["a"][0] == pytest.approx(2.0, abs=1e-2)


class TestMetal:
    def test_flat_stack(self):
        grid, cap, src, _ = scene()
        s = simulate(ParamMaps.uniform(grid, K, 0.0), src, cap, grid)
        assert detect_metal(s, 0.1)

    def test_wood_stack(self):
        grid, cap, src, p = scene()
        s = simulate(p, src, cap, grid)
        assert s.rise.max() > 1.0
        assert not detect_metal(s, 0.1)

    def test_rise_exactly_at_floor(self):
        grid, cap, _, _ = scene()
        f = np.full((cap.n_frames,) + grid.surface_shape, 300.0)
        f[5:, 3, 3] += 0.25
        s = TsfStack(f, cap, grid)
        assert not detect_metal(s, 0.25)
        assert detect_metal(s, 0.2500001)

    def test_recovery_on_flat_stack(self):
        grid, cap, src, _ = scene()
        s = simulate(ParamMaps.uniform(grid, K, 0.0), src, cap, grid)
        res = recover(s, src, grid, OptimConfig(epochs=120, k_bounds=(1e-9, 1.6e-7)))
        assert res.metal_flag
        assert res.params.eps_prime[res.roi_mask].max() < 1e-3


class TestRoi:
    def test_roi_grows_with_signal(self):
        grid, cap, src, p = scene()
        strong = simulate(p, src, cap, grid)
        weak = simulate(ParamMaps.uniform(grid, K, 0.2), src, cap, grid)
        a = beam_roi(strong, src, 0.1)
        b = beam_roi(weak, src, 0.1)
        assert a.sum() > b.sum() > 0
        assert a[int(src.center_y), int(src.center_x)]

    def test_fallback_radius(self):
        grid, cap, src, _ = scene()
        flat = TsfStack(np.full((cap.n_frames,) + grid.surface_shape, 300.0), cap, grid)
        roi = beam_roi(flat, src, 0.1)
        np.testing.assert_array_equal(roi, beam_core(src, grid.surface_shape, 3 * src.sigma_px))

    def test_core_default_radius(self):
        _, _, src, _ = scene()
        core = beam_core(src, (16, 16))
        assert core.sum() == 12  # centre between pixels, radius 2 px


class TestRecover:
    def test_self_consistency(self, fitted):
        grid, cap, src, p, measured, res = fitted
        again = simulate(res.params, src, cap, grid)
        assert loss_mse(again, measured).mse < 1e-6 * np.var(measured.rise)

    def test_centre_diffusivity(self, fitted):
        grid, cap, src, p, measured, res = fitted
        core = beam_core(src, grid.surface_shape)
        assert res.roi_mean("k", core) == pytest.approx(K, rel=1e-2)
        assert res.roi_mean("eps_prime", core) == pytest.approx(2.0, rel=1e-2)

    def test_windowed_loss_non_increasing(self, fitted):
        assert np.all(np.diff(window_means(fitted[-1].loss_history)) <= 0)

    def test_maps_within_bounds(self, fitted):
        res = fitted[-1]
        assert res.params.k.min() >= CFG.k_bounds[0] and res.params.k.max() <= CFG.k_bounds[1]
        assert res.params.eps_prime.min() >= 0 and res.params.eps_prime.max() <= CFG.eps_bounds[1]

    def test_result_fields(self, fitted):
        res = fitted[-1]
        assert res.epochs_run == CFG.epochs
        assert res.converged
        assert not res.metal_flag

    @settings(max_examples=5, deadline=None)
    @given(lr=st.floats(min_value=0.05, max_value=0.5), seed=st.integers(0, 1000))
    def test_projection_with_aggressive_steps(self, lr, seed):
        grid, cap, src, p = scene(nx=8, ny=8, nz=4, n_frames=11, t_on=1.25)
        s = simulate(p, src, cap, grid)
        rng = np.random.default_rng(seed)
        noisy = TsfStack(s.frames + rng.normal(0, 0.2, s.frames.shape), cap, grid)
        cfg = OptimConfig(epochs=15, lr0=lr, k_bounds=(1e-8, 1.6e-7), eps_bounds=(0.5, 3.0))
        res = recover(noisy, src, grid, cfg)
        assert res.params.k.min() >= 1e-8 and res.params.k.max() <= 1.6e-7
        assert res.params.eps_prime.min() >= 0.5 and res.params.eps_prime.max() <= 3.0

    def test_ambient_independence(self):
        out = []
        for amb in (290.0, 310.0):
            grid, cap, src, p = scene(ambient=amb)
            res = recover(simulate(p, src, cap, grid), src, grid, CFG)
            out.append(res.roi_mean("k", beam_core(src, grid.surface_shape)))
        assert out[0] == pytest.approx(out[1], rel=1e-2)

    def test_unstable_bounds(self):
        grid, cap, src, p = scene()
        s = simulate(p, src, cap, grid)
        with pytest.raises(StabilityError, match="CFL"):
            recover(s, src, grid, OptimConfig(epochs=1))

    def test_surface_mismatch(self):
        grid, cap, src, p = scene()
        other, _, _, _ = scene(nx=12)
        with pytest.raises(InvalidArgumentError):
            recover(simulate(p, src, cap, grid), src, other, CFG)


def two_layer_stack(k_top, k_bottom, n_top=1):
    grid, cap, src, p = scene(dt=0.125)
    k = np.full(grid.shape, k_bottom)
    k[:n_top] = k_top
    frames, _ = simulate_volume(k, p.eps_prime, src, cap, grid)
    return grid, cap, src, TsfStack(frames, cap, grid)


class TestTwoLayer:
    CFG2 = OptimConfig(epochs=300, k_bounds=(1e-9, 2.4e-7), roi_radius=100.0)

    def test_degenerate_single_layer(self):
        grid, cap, src, s = two_layer_stack(1e-7, 1e-7, n_top=2)
        model, hist, _ = recover_two_layer(s, src, grid, self.CFG2, top_thickness_m=1e-3)
        assert model.k_top == pytest.approx(model.k_bottom, rel=1e-2)
        assert model.k_bottom_constrained

    def test_full_depth_flags_bottom(self):
        grid, cap, src, s = two_layer_stack(1e-7, 1e-7, n_top=8)
        model, _, _ = recover_two_layer(s, src, grid, OptimConfig(epochs=5, k_bounds=(1e-9, 2.4e-7)),
                                        top_thickness_m=8 * 5e-4)
        assert not model.k_bottom_constrained

    @pytest.mark.parametrize("t", [2.5e-4, 0.0, 5e-3])
    def test_thickness_validation(self, t):
        grid, cap, src, s = two_layer_stack(1e-7, 1e-7)
        with pytest.raises(InvalidArgumentError):
            recover_two_layer(s, src, grid, self.CFG2, top_thickness_m=t)

    def test_windowed_loss_non_increasing(self):
        grid, cap, src, s = two_layer_stack(1e-7, 2e-7, n_top=1)
        model, hist, _ = recover_two_layer(s, src, grid, self.CFG2, top_thickness_m=5e-4)
        assert np.all(np.diff(window_means(hist)) <= 0)
        assert model.k_top == pytest.approx(1e-7, rel=2e-2)
        assert model.k_bottom == pytest.approx(2e-7, rel=2e-2)
