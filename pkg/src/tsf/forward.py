"""Explicit forward-time centered-space heat stepping.

The update is ``u <- u + dt * (k * lap(u) + eps_prime * f)`` with ``k`` and
``eps_prime`` given per surface pixel and extruded along depth. The source
only touches the ``z = 0`` layer. Boundaries are insulated through ghost
cells that copy the edge value, which keeps the total heat content exactly
conserved when ``k`` is constant and the source is off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .domain import ParamMaps, TemperatureField, TsfStack, substeps_per_frame
from .errors import FrameStepMismatchError, InvalidArgumentError, StabilityError

__all__ = [
    "StabilityReport",
    "stability_check",
    "laplacian3d",
    "step",
    "simulate",
    "simulate_volume",
    "source_on_steps",
    "extrude",
]


@dataclass(frozen=True)
class StabilityReport:
    cfl_factor: float
    stable: bool


def _max_k(k):
    if isinstance(k, ParamMaps):
        k = k.k
    k = np.asarray(k, dtype=np.float64)
    return float(k.max()) if k.size else 0.0


def stability_check(params, grid):
    """CFL factor ``max(k) * dt * (2/dx^2 + 2/dy^2 + 2/dz^2)``.

    ``params`` may be a ParamMaps, an array of diffusivities or a scalar.
    """
    kmax = _max_k(params)
    cfl = kmax * grid.dt * (2.0 / grid.dx**2 + 2.0 / grid.dy**2 + 2.0 / grid.dz**2)
    return StabilityReport(cfl, cfl <= 1.0)


def _require_stable(params, grid):
    report = stability_check(params, grid)
    if not report.stable:
        raise StabilityError(report)
    return report


def _coeffs(grid):
    return 1.0 / grid.dx**2, 1.0 / grid.dy**2, 1.0 / grid.dz**2


def _values(u):
    return u.values if isinstance(u, TemperatureField) else np.asarray(u, dtype=np.float64)


def laplacian3d(u, grid):
    """Seven-point Laplacian with replicate ghost cells, in K/m^2.

    Parameters
    ----------
    u : TemperatureField or ndarray
        Field of shape ``(nz, ny, nx)``.
    grid : GridSpec

    Returns
    -------
    ndarray
        Same shape as ``u``.
    """
    v = _values(u)
    if v.shape != grid.shape:
        raise InvalidArgumentError(f"field shape {v.shape} != grid shape {grid.shape}")
    p = np.pad(v, 1, mode="edge")
    c = p[1:-1, 1:-1, 1:-1]
    cx, cy, cz = _coeffs(grid)
    return (
        (p[1:-1, 1:-1, 2:] + p[1:-1, 1:-1, :-2] - 2.0 * c) * cx
        + (p[1:-1, 2:, 1:-1] + p[1:-1, :-2, 1:-1] - 2.0 * c) * cy
        + (p[2:, 1:-1, 1:-1] + p[:-2, 1:-1, 1:-1] - 2.0 * c) * cz
    )


def extrude(map2d, grid):
    """Broadcast a ``(ny, nx)`` map to a contiguous ``(nz, ny, nx)`` volume."""
    return np.ascontiguousarray(np.broadcast_to(np.asarray(map2d, dtype=np.float64), grid.shape))


def step(u, params, src, t, grid):
    """Advance ``u`` by one time step of length ``grid.dt``.

    This is the plain numpy form of the recurrence; ``simulate`` runs the
    same arithmetic through fused kernels.
    """
    if t < 0:
        raise InvalidArgumentError("t must be >= 0")
    _require_stable(params, grid)
    v = _values(u)
    lap = laplacian3d(v, grid)
    rate = params.k[None, :, :] * lap
    rate[0] += params.eps_prime * src.at(grid.surface_shape, t)
    return TemperatureField(v + grid.dt * rate)


def source_on_steps(src, grid, n_steps=None):
    """Boolean per step index: whether the source is on during that step."""
    n = grid.n_steps if n_steps is None else n_steps
    t = np.arange(n) * grid.dt
    return t <= src.t_on_s + 1e-9 * grid.dt


def _check_schedule(cap, grid):
    s = substeps_per_frame(cap.frame_dt_s, grid.dt)
    if grid.n_steps != (cap.n_frames - 1) * s:
        raise FrameStepMismatchError(
            f"grid.n_steps={grid.n_steps} but capture needs {(cap.n_frames - 1) * s} steps"
        )
    return s


def _initial_volume(cap, grid, initial):
    if initial is None:
        return np.full(grid.shape, float(cap.ambient_K))
    initial = np.asarray(initial, dtype=np.float64)
    if initial.shape == grid.surface_shape:
        return extrude(initial, grid)
    if initial.shape == grid.shape:
        return np.array(initial, dtype=np.float64)
    raise InvalidArgumentError("initial condition must be a surface frame or full volume")


def simulate_volume(k_vol, eps_prime, src, cap, grid, initial=None, keep_states=False):
    """Run the recurrence with a per-voxel diffusivity volume.

    Returns ``(frames, states)`` where ``frames`` is ``(n_frames, ny, nx)`` and
    ``states`` is the list of all ``n_steps + 1`` volumes when ``keep_states``
    is set (otherwise None).
    """
    k_vol = np.ascontiguousarray(k_vol, dtype=np.float64)
    if k_vol.shape != grid.shape:
        raise InvalidArgumentError(f"k volume shape {k_vol.shape} != grid shape {grid.shape}")
    _require_stable(k_vol, grid)
    s = _check_schedule(cap, grid)
    src_map = np.ascontiguousarray(np.asarray(eps_prime, dtype=np.float64) * src.spatial(grid.surface_shape))
    zero = np.zeros(grid.surface_shape)
    on = source_on_steps(src, grid)
    cx, cy, cz = _coeffs(grid)

    u = _initial_volume(cap, grid, initial)
    frames = np.empty((cap.n_frames,) + grid.surface_shape)
    frames[0] = u[0]
    states = [u.copy()] if keep_states else None
    nxt = np.empty_like(u)
    for n in range(grid.n_steps):
        _kernels.ftcs_step(u, k_vol, src_map if on[n] else zero, grid.dt, cx, cy, cz, nxt)
        u, nxt = nxt, u
        if keep_states:
            states.append(u.copy())
        if (n + 1) % s == 0:
            frames[(n + 1) // s] = u[0]
    return frames, states


def simulate(params, src, cap, grid, initial=None):
    """Forward-simulate a TSF stack.

    The initial condition is ``cap.ambient_K`` everywhere unless ``initial``
    (a surface frame, extruded along depth, or a full volume) is given. Frame
    ``i`` is the surface layer after ``i * frame_dt_s / dt`` steps.
    """
    if params.shape != grid.surface_shape:
        raise InvalidArgumentError("parameter maps do not match grid surface")
    frames, _ = simulate_volume(extrude(params.k, grid), params.eps_prime, src, cap, grid, initial)
    return TsfStack(frames, cap, grid)
