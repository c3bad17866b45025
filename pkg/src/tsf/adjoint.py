"""Reverse-mode gradients of the TSF matching loss.

The forward recurrence is linear in the state, so its transpose is another
stencil sweep run backwards in time. Gradients produced here are exact for
the discrete model (up to roundoff), which is what ``gradient_check``
verifies against central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .domain import TsfStack
from .errors import InvalidArgumentError
from .forward import (
    _check_schedule,
    _coeffs,
    _initial_volume,
    _require_stable,
    extrude,
    simulate_volume,
    source_on_steps,
)

__all__ = [
    "LossReport",
    "ParamGradients",
    "GradCheckReport",
    "loss_mse",
    "loss_scale",
    "grad_params",
    "volume_gradients",
    "gradient_check",
    "DEFAULT_MEMORY_BUDGET",
]

DEFAULT_MEMORY_BUDGET = 1 << 30  # bytes of stored forward states


@dataclass(frozen=True)
class LossReport:
    """Mean squared error over frames 1..n-1 (frame 0 is the shared start)."""

    mse: float
    per_frame: tuple
    mode: str = "kelvin"


@dataclass(frozen=True, eq=False)
class ParamGradients:
    d_k: np.ndarray
    d_eps_prime: np.ndarray


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_probes: int
    rel_tol: float
    probes: tuple  # (map, y, x, adjoint, finite_difference, rel_err)


def loss_scale(measured, mode):
    """Divisor applied to residuals: 1 in kelvin mode, peak rise when normalized."""
    if mode == "kelvin":
        return 1.0
    if mode == "normalized":
        rise = float(np.max(np.abs(measured.rise)))
        return rise if rise > 0 else 1.0
    raise InvalidArgumentError(f"unknown loss mode {mode!r}")


def _per_frame(sim_frames, meas_frames, scale):
    r = (sim_frames[1:] - meas_frames[1:]) / scale
    return np.mean(r * r, axis=(1, 2))


def loss_mse(simulated, measured, mode="kelvin"):
    """Per-frame and overall MSE between two stacks on identical configs."""
    if simulated.grid != measured.grid or simulated.capture != measured.capture:
        raise InvalidArgumentError("stacks were produced with different grid/capture configs")
    if simulated.frames.shape != measured.frames.shape:
        raise InvalidArgumentError("stack shapes differ")
    scale = loss_scale(measured, mode)
    pf = _per_frame(simulated.frames, measured.frames, scale)
    return LossReport(float(pf.mean()) if pf.size else 0.0, tuple(float(v) for v in pf), mode)


def volume_gradients(k_vol, eps_map, src, cap, grid, measured_frames, scale=1.0,
                     initial=None, memory_budget=DEFAULT_MEMORY_BUDGET):
    """Loss and exact gradients for a per-voxel diffusivity volume.

    Returns
    -------
    per_frame : ndarray
        MSE of frames 1..n-1.
    sim_frames : ndarray
        Simulated frames, ``(n_frames, ny, nx)``.
    d_k_vol : ndarray
        ``dJ/dk`` for every voxel, shape ``(nz, ny, nx)``.
    d_eps : ndarray
        ``dJ/d eps_prime`` per surface pixel.
    """
    k_vol = np.ascontiguousarray(k_vol, dtype=np.float64)
    eps_map = np.asarray(eps_map, dtype=np.float64)
    _require_stable(k_vol, grid)
    s = _check_schedule(cap, grid)
    if cap.n_frames < 2:
        raise InvalidArgumentError("need at least two frames to form a loss")
    n_steps = grid.n_steps
    fs = grid.surface_shape
    f_s = src.spatial(fs)
    src_map = np.ascontiguousarray(eps_map * f_s)
    zero = np.zeros(fs)
    on = source_on_steps(src, grid)
    cx, cy, cz = _coeffs(grid)
    dt = grid.dt

    state_bytes = 8 * int(np.prod(grid.shape))
    if (n_steps + 1) * state_bytes <= memory_budget:
        every = 1
    else:
        every = max(1, math.ceil(math.sqrt(n_steps)))

    # forward: keep checkpoints every `every` steps plus surface frames
    u = _initial_volume(cap, grid, initial)
    checkpoints = {0: u.copy()}
    frames = np.empty((cap.n_frames,) + fs)
    frames[0] = u[0]
    nxt = np.empty_like(u)
    for n in range(n_steps):
        _kernels.ftcs_step(u, k_vol, src_map if on[n] else zero, dt, cx, cy, cz, nxt)
        u, nxt = nxt, u
        if (n + 1) % s == 0:
            frames[(n + 1) // s] = u[0]
        if (n + 1) % every == 0 and n + 1 < n_steps:
            checkpoints[n + 1] = u.copy()

    n_meas = (cap.n_frames - 1) * fs[0] * fs[1]
    resid = (frames - measured_frames) / scale
    per_frame = np.mean(resid[1:] ** 2, axis=(1, 2))
    inject = 2.0 * resid / (n_meas * scale)

    lam = np.zeros(grid.shape)
    lam_next = np.empty_like(lam)
    d_k_vol = np.zeros(grid.shape)
    d_eps = np.zeros(fs)
    if n_steps % s == 0:
        lam[0] += inject[n_steps // s]

    seg_end = n_steps
    starts = sorted(checkpoints, reverse=True)
    for a in starts:
        # rebuild states u^a .. u^(seg_end-1)
        seg = [checkpoints[a]]
        for n in range(a, seg_end - 1):
            out = np.empty_like(lam)
            _kernels.ftcs_step(seg[-1], k_vol, src_map if on[n] else zero, dt, cx, cy, cz, out)
            seg.append(out)
        for n in range(seg_end - 1, a - 1, -1):
            if on[n]:
                d_eps += dt * lam[0] * f_s
            _kernels.adjoint_step(lam, seg[n - a], k_vol, dt, cx, cy, cz, lam_next, d_k_vol)
            lam, lam_next = lam_next, lam
            if n > 0 and n % s == 0:
                lam[0] += inject[n // s]
        seg_end = a
    return per_frame, frames, d_k_vol, d_eps


def grad_params(params, src, cap, grid, measured, mode="kelvin", initial=None,
                memory_budget=DEFAULT_MEMORY_BUDGET):
    """Loss report and gradients with respect to both parameter maps.

    ``measured`` must share ``cap`` and ``grid``. The diffusivity gradient of
    each pixel sums the contributions of its whole depth column.
    """
    if not isinstance(measured, TsfStack):
        raise InvalidArgumentError("measured must be a TsfStack")
    if measured.frames.shape != (cap.n_frames,) + grid.surface_shape:
        raise InvalidArgumentError("measured stack does not match capture/grid")
    scale = loss_scale(measured, mode)
    per_frame, _, d_k_vol, d_eps = volume_gradients(
        extrude(params.k, grid), params.eps_prime, src, cap, grid, measured.frames,
        scale, initial, memory_budget,
    )
    report = LossReport(float(per_frame.mean()), tuple(float(v) for v in per_frame), mode)
    return report, ParamGradients(d_k_vol.sum(axis=0), d_eps)


def _loss_only(k_map, eps_map, src, cap, grid, measured, scale, initial):
    # Zero-flux boundaries make the recurrence shift invariant; working on
    # deviations from ambient keeps the finite differences free of the
    # cancellation a ~300 K offset would cause.
    ref = cap.ambient_K
    u0 = _initial_volume(cap, grid, initial) - ref
    frames, _ = simulate_volume(extrude(k_map, grid), eps_map, src, cap, grid, u0)
    return float(_per_frame(frames, measured.frames - ref, scale).mean())


def gradient_check(params, src, cap, grid, measured, n_probes=32, rel_tol=1e-4,
                   seed=0, h_rel=1e-6, mode="kelvin", initial=None, grad_fn=None,
                   abs_tol=1e-12):
    """Compare adjoint gradients against central finite differences.

    ``n_probes`` random pixels are drawn for each of the two maps. A probe
    passes when its relative error is within ``rel_tol`` or when
    ``|p| * |adjoint - fd|`` (loss change per unit relative change of the
    parameter) is below ``abs_tol``; the latter covers points where both
    methods give ~0. ``grad_fn`` replaces ``grad_params`` and exists for negative
    controls.
    """
    grad_fn = grad_params if grad_fn is None else grad_fn
    # Both sides work on deviations from ambient so they evaluate the very
    # same discrete loss (see _loss_only).
    ref = cap.ambient_K
    u0 = _initial_volume(cap, grid, initial) - ref
    shifted = TsfStack(measured.frames - ref, cap, grid, "normalized")
    _, g = grad_fn(params, src, cap, grid, shifted, mode=mode, initial=u0)
    scale = loss_scale(measured, mode)
    rng = np.random.default_rng(seed)
    ny, nx = grid.surface_shape
    npix = ny * nx
    probes = []
    max_err = 0.0
    passed = True
    for name in ("k", "eps_prime"):
        flat = rng.choice(npix, size=min(n_probes, npix), replace=False)
        for idx in flat:
            y, x = divmod(int(idx), nx)
            k = np.array(params.k)
            e = np.array(params.eps_prime)
            target = k if name == "k" else e
            p0 = target[y, x]
            h = h_rel * abs(p0) if p0 != 0 else h_rel
            target[y, x] = p0 + h
            jp = _loss_only(k, e, src, cap, grid, measured, scale, initial)
            target[y, x] = p0 - h
            jm = _loss_only(k, e, src, cap, grid, measured, scale, initial)
            fd = (jp - jm) / (2.0 * h)
            adj = float((g.d_k if name == "k" else g.d_eps_prime)[y, x])
            diff = abs(adj - fd)
            rel = diff / max(abs(fd), abs_tol)
            # absolute fallback in loss units: change of J per unit relative
            # change of the parameter, so it means the same for k and eps'
            negligible = diff * (abs(p0) if p0 != 0 else 1.0) <= abs_tol
            ok = rel <= rel_tol or negligible
            if not negligible:
                max_err = max(max_err, rel)
            passed = passed and ok
            probes.append((name, y, x, adj, fd, rel))
    return GradCheckReport(max_err, passed, len(probes), rel_tol, tuple(probes))
