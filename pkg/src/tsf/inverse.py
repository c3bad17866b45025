"""Recover diffusivity and absorption maps from a measured TSF.

Each epoch simulates the stack, back-propagates the MSE through the solver,
takes one Adam step on the normalized maps (value / upper bound) and clamps
them back into their bounds. Updates are restricted to a disc around the
beam where the data actually constrain the parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import DEFAULT_MEMORY_BUDGET, LossReport, loss_scale, volume_gradients
from .domain import ParamMaps, substeps_per_frame
from .errors import DivergenceError, InvalidArgumentError, StabilityError
from .forward import extrude, stability_check

__all__ = [
    "OptimConfig",
    "RecoveryResult",
    "TwoLayerModel",
    "Adam",
    "lr_schedule",
    "detect_metal",
    "beam_roi",
    "beam_core",
    "recover",
    "recover_two_layer",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    """Settings of the recovery loop.

    Parameters are optimized in normalized units (value divided by the upper
    bound), so ``lr0`` is a fraction of the allowed range per epoch.
    """

    epochs: int = 400
    lr0: float = 1e-2
    lr_decay: float = 0.5
    decay_every: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    k_bounds: tuple = (1e-9, 1e-5)
    eps_bounds: tuple = (0.0, 10.0)
    loss_mode: str = "normalized"
    noise_floor_K: float = 0.1
    roi_radius: float | None = None
    converge_window: int = 20
    converge_rtol: float = 1e-6
    early_stop: bool = False
    plateau_patience: int = 30
    plateau_factor: float = 0.5
    initial_mode: str = "mean"
    loss_threshold: float = 1e-3
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise InvalidArgumentError("lr_decay must lie in (0, 1]")
        if self.decay_every < 1:
            raise InvalidArgumentError("decay_every must be >= 1")
        if self.plateau_patience < 0 or not 0 < self.plateau_factor <= 1:
            raise InvalidArgumentError("plateau_patience must be >= 0 and plateau_factor in (0, 1]")
        for name in ("k_bounds", "eps_bounds"):
            lo, hi = getattr(self, name)
            if lo < 0 or not lo < hi:
                raise InvalidArgumentError(f"{name} must be non-negative with min < max")
        if self.loss_mode not in ("kelvin", "normalized"):
            raise InvalidArgumentError(f"unknown loss mode {self.loss_mode!r}")
        if self.initial_mode not in ("mean", "frame"):
            raise InvalidArgumentError(f"unknown initial mode {self.initial_mode!r}")


@dataclass(frozen=True, eq=False)
class RecoveryResult:
    params: ParamMaps
    loss_history: list
    converged: bool
    metal_flag: bool
    roi_mask: np.ndarray = field(repr=False, default=None)

    @property
    def epochs_run(self):
        return len(self.loss_history)

    def roi_mean(self, which="k", mask=None):
        """Mean of a recovered map over ``mask`` (default: the update disc)."""
        m = getattr(self.params, which)
        return float(m[self.roi_mask if mask is None else mask].mean())


@dataclass(frozen=True)
class TwoLayerModel:
    top_thickness_m: float
    k_top: float
    k_bottom: float
    eps_prime_surface: np.ndarray
    k_bottom_constrained: bool = True


class Adam:
    """Adam over a dict of arrays, updated in place."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def lr_schedule(cfg, epoch):
    """Step decay: ``lr0 * lr_decay ** floor(epoch / decay_every)``."""
    if epoch < 0:
        raise InvalidArgumentError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.decay_every)


def detect_metal(measured, noise_floor_K):
    """True when no pixel ever rises at least ``noise_floor_K`` above frame 0."""
    peak = np.max(measured.frames - measured.frames[0], axis=0)
    return bool(np.all(peak < noise_floor_K))


def beam_roi(measured, src, noise_floor_K, radius=None):
    """Disc around the beam centre used for per-pixel updates.

    Without an explicit ``radius`` the disc extends to the largest distance
    at which the peak of the ring-averaged temperature rise still exceeds
    the noise floor. Averaging each one-pixel ring before taking the peak
    over time keeps per-pixel noise from inflating the radius. When nothing
    rises above the floor the disc falls back to three beam widths.
    """
    ny, nx = measured.grid.surface_shape
    yy, xx = np.mgrid[0:ny, 0:nx]
    dist = np.hypot(xx - src.center_x, yy - src.center_y)
    if radius is None:
        ring = np.floor(dist).astype(int).ravel()
        counts = np.bincount(ring)
        rise = (measured.frames - measured.frames[0]).reshape(measured.n_frames, -1)
        sums = np.stack([np.bincount(ring, weights=r, minlength=counts.size) for r in rise])
        peak = np.max(sums / np.maximum(counts, 1), axis=0)
        above = np.nonzero((peak > noise_floor_K) & (counts > 0))[0]
        radius = float(above.max()) + 1.0 if above.size else 3.0 * src.sigma_px
    return dist <= radius


def beam_core(src, shape, radius_px=None):
    """Disc of radius ``radius_px`` (default one beam sigma) at the beam centre.

    This is where the data pin the maps down most tightly, so it is the
    region used to report a single recovered value.
    """
    ny, nx = shape
    r = src.sigma_px if radius_px is None else radius_px
    yy, xx = np.mgrid[0:ny, 0:nx]
    return np.hypot(xx - src.center_x, yy - src.center_y) <= r


def _check_grid(measured, grid):
    if grid.surface_shape != measured.grid.surface_shape:
        raise InvalidArgumentError("grid surface does not match the measured frames")
    cap = measured.capture
    s = substeps_per_frame(cap.frame_dt_s, grid.dt)
    return replace(grid, n_steps=(cap.n_frames - 1) * s)


def _check_stable(k_max, grid):
    report = stability_check(k_max, grid)
    if not report.stable:
        raise StabilityError(report)


def _initial_surface(measured, cfg, initial):
    # A uniform start (the mean of frame 0) keeps per-pixel camera noise from
    # being extruded through the whole depth as spurious heat.
    if initial is not None:
        return initial
    if cfg.initial_mode == "frame":
        return measured.frames[0]
    return np.full(measured.grid.surface_shape, float(measured.frames[0].mean()))


def _converged(history, window, rtol):
    if len(history) <= window:
        return False
    best_before = min(history[:-window])
    best_now = min(history)
    return (best_before - best_now) <= rtol * abs(best_before)


def _run_adam(theta, grad_fn, cfg, project):
    """Shared epoch loop; returns (loss_history, converged)."""
    opt = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    history = []
    mses = []
    converged = False
    # On top of the step schedule the rate is halved whenever the best loss
    # has not improved for `plateau_patience` epochs, which damps the jitter
    # Adam shows once it sits at the bottom of the valley.
    best, stale, damp = math.inf, 0, 1.0
    for epoch in range(cfg.epochs):
        report, grads = grad_fn(theta)
        if not math.isfinite(report.mse) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(
                f"loss became non-finite at epoch {epoch}; lower the learning rate"
            )
        history.append(report)
        mses.append(report.mse)
        if cfg.early_stop and _converged(mses, cfg.converge_window, cfg.converge_rtol):
            converged = True
            break
        if report.mse < best:
            best, stale = report.mse, 0
        else:
            stale += 1
            if cfg.plateau_patience and stale >= cfg.plateau_patience:
                damp *= cfg.plateau_factor
                stale = 0
        opt.step(theta, grads, damp * lr_schedule(cfg, epoch))
        project(theta)
    if not converged:
        converged = (_converged(mses, cfg.converge_window, cfg.converge_rtol)
                     or mses[-1] < cfg.loss_threshold)
    return history, converged


def recover(measured, src, grid, cfg=OptimConfig(), initial=None):
    """Estimate per-pixel ``k`` and ``eps_prime`` maps from ``measured``.

    The initial condition comes from frame 0: its mean everywhere by default,
    or frame 0 extruded along depth with ``cfg.initial_mode = "frame"``. An
    explicit ``initial`` surface or volume overrides both. Maps start at the
    middle of their bounds.

    Returns
    -------
    RecoveryResult
    """
    grid = _check_grid(measured, grid)
    k_lo, k_hi = cfg.k_bounds
    e_lo, e_hi = cfg.eps_bounds
    _check_stable(k_hi, grid)
    cap = measured.capture
    metal = detect_metal(measured, cfg.noise_floor_K)
    roi = beam_roi(measured, src, cfg.noise_floor_K, cfg.roi_radius)
    scale = loss_scale(measured, cfg.loss_mode)
    u0 = _initial_surface(measured, cfg, initial)
    shape = grid.surface_shape

    theta = {
        "k": np.full(shape, 0.5 * (k_lo + k_hi) / k_hi),
        "eps": np.full(shape, 0.5 * (e_lo + e_hi) / e_hi),
    }
    bounds = {"k": (k_lo / k_hi, 1.0), "eps": (e_lo / e_hi, 1.0)}

    def grad_fn(th):
        per_frame, _, dk_vol, de = volume_gradients(
            extrude(th["k"] * k_hi, grid), th["eps"] * e_hi, src, cap, grid,
            measured.frames, scale, u0, cfg.memory_budget,
        )
        rep = LossReport(float(per_frame.mean()), tuple(per_frame.tolist()), cfg.loss_mode)
        return rep, {"k": dk_vol.sum(axis=0) * k_hi * roi, "eps": de * e_hi * roi}

    def project(th):
        for name, (lo, hi) in bounds.items():
            np.clip(th[name], lo, hi, out=th[name])

    history, converged = _run_adam(theta, grad_fn, cfg, project)
    params = ParamMaps(theta["k"] * k_hi, theta["eps"] * e_hi)
    log.info("recover: %d epochs, final loss %.3g, converged=%s",
             len(history), history[-1].mse, converged)
    return RecoveryResult(params, history, converged, metal, roi)


def _layer_count(top_thickness_m, grid):
    n = top_thickness_m / grid.dz
    n_top = int(round(n))
    if n_top < 1 or abs(n - n_top) > 1e-6:
        raise InvalidArgumentError("top_thickness_m must be a positive integer multiple of dz")
    if n_top > grid.nz:
        raise InvalidArgumentError("top layer is thicker than the grid")
    return n_top


def recover_two_layer(measured, src, grid, cfg=OptimConfig(), top_thickness_m=5e-4,
                      initial=None, eps_map=False):
    """Recover a surface layer of known thickness on top of a bulk layer.

    Voxels with ``z < top_thickness_m`` share ``k_top``; the rest share
    ``k_bottom``. The surface absorption is optimized jointly, as a single
    scalar by default or per pixel inside the beam disc with ``eps_map``. When the
    top layer fills the whole grid, ``k_bottom`` has no influence on the data
    and the result reports it as unconstrained.

    Returns
    -------
    (TwoLayerModel, list of LossReport, bool converged)
    """
    grid = _check_grid(measured, grid)
    n_top = _layer_count(top_thickness_m, grid)
    k_lo, k_hi = cfg.k_bounds
    e_lo, e_hi = cfg.eps_bounds
    _check_stable(k_hi, grid)
    cap = measured.capture
    roi = beam_roi(measured, src, cfg.noise_floor_K, cfg.roi_radius)
    scale = loss_scale(measured, cfg.loss_mode)
    u0 = _initial_surface(measured, cfg, initial)
    shape = grid.surface_shape
    mid = 0.5 * (k_lo + k_hi) / k_hi

    theta = {
        "k_top": np.array([mid]),
        "k_bottom": np.array([mid]),
        "eps": np.full(shape if eps_map else (1,), 0.5 * (e_lo + e_hi) / e_hi),
    }

    def volume(th):
        k = np.empty(grid.shape)
        k[:n_top] = th["k_top"][0] * k_hi
        k[n_top:] = th["k_bottom"][0] * k_hi
        return k

    def grad_fn(th):
        per_frame, _, dk_vol, de = volume_gradients(
            volume(th), th["eps"] * e_hi, src, cap, grid, measured.frames, scale, u0,
            cfg.memory_budget,
        )
        rep = LossReport(float(per_frame.mean()), tuple(per_frame.tolist()), cfg.loss_mode)
        return rep, {
            "k_top": np.array([dk_vol[:n_top].sum() * k_hi]),
            "k_bottom": np.array([dk_vol[n_top:].sum() * k_hi]),
            "eps": de * e_hi * roi if eps_map else np.array([(de * e_hi).sum()]),
        }

    _, g0 = grad_fn(theta)
    constrained = abs(g0["k_bottom"][0]) > 1e-12 * abs(g0["k_top"][0])

    def project(th):
        np.clip(th["k_top"], k_lo / k_hi, 1.0, out=th["k_top"])
        np.clip(th["k_bottom"], k_lo / k_hi, 1.0, out=th["k_bottom"])
        np.clip(th["eps"], e_lo / e_hi, 1.0, out=th["eps"])

    history, converged = _run_adam(theta, grad_fn, cfg, project)
    model = TwoLayerModel(
        top_thickness_m,
        float(theta["k_top"][0] * k_hi),
        float(theta["k_bottom"][0] * k_hi),
        np.broadcast_to(theta["eps"] * e_hi, shape).copy(),
        bool(constrained),
    )
    return model, history, converged
