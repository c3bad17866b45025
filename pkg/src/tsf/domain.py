"""Core value types and unit conversions.

Arrays follow a fixed layout: 3D fields are ``(nz, ny, nx)`` so that x is the
fastest-varying index, and surface frames are ``(ny, nx)``. The ``z = 0``
plane is the surface facing the camera. Everything is SI (K, m, s).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import FrameStepMismatchError, InvalidArgumentError

__all__ = [
    "GridSpec",
    "CaptureConfig",
    "TemperatureField",
    "TsfStack",
    "ParamMaps",
    "SourceModel",
    "EmissivityComponents",
    "diffusivity_from_bulk",
    "eps_prime_from_components",
    "true_temp_from_camera",
    "substeps_per_frame",
]


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridSpec:
    """Voxel geometry and time step of the explicit solver."""

    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    dt: float
    n_steps: int

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        for name in ("dx", "dy", "dz", "dt"):
            if not float(getattr(self, name)) > 0:
                raise InvalidArgumentError(f"{name} must be > 0")
        if int(self.n_steps) < 0:
            raise InvalidArgumentError("n_steps must be >= 0")

    @property
    def shape(self):
        return (self.nz, self.ny, self.nx)

    @property
    def surface_shape(self):
        return (self.ny, self.nx)

    @classmethod
    def for_capture(cls, nx, ny, nz, pitch, dt, capture, dy=None, dz=None):
        """Grid whose step count covers ``capture`` exactly."""
        s = substeps_per_frame(capture.frame_dt_s, dt)
        return cls(
            nx, ny, nz, pitch, pitch if dy is None else dy,
            pitch if dz is None else dz, dt, (capture.n_frames - 1) * s,
        )


@dataclass(frozen=True)
class CaptureConfig:
    """Camera schedule: frame 0 is captured at t = 0, before heating starts."""

    t_on_s: float
    frame_dt_s: float
    n_frames: int
    ambient_K: float = 293.15

    def __post_init__(self):
        if not self.frame_dt_s > 0:
            raise InvalidArgumentError("frame_dt_s must be > 0")
        if self.n_frames < 1:
            raise InvalidArgumentError("n_frames must be >= 1")
        if self.t_on_s < 0:
            raise InvalidArgumentError("t_on_s must be >= 0")
        if self.t_on_s > self.n_frames * self.frame_dt_s:
            raise InvalidArgumentError("t_on_s exceeds the capture duration")
        if not self.ambient_K > 0:
            raise InvalidArgumentError("ambient_K must be a positive absolute temperature")

    @property
    def horizon_s(self):
        return (self.n_frames - 1) * self.frame_dt_s

    @property
    def times(self):
        return np.arange(self.n_frames) * self.frame_dt_s


def substeps_per_frame(frame_dt_s, dt):
    """Number of solver steps between consecutive frames.

    Raises FrameStepMismatchError unless ``frame_dt_s`` is an integer
    multiple of ``dt`` (to 1e-9 relative).
    """
    ratio = frame_dt_s / dt
    s = int(round(ratio))
    if s < 1 or abs(ratio - s) > 1e-9 * max(1.0, ratio):
        raise FrameStepMismatchError(
            f"frame interval {frame_dt_s} s is not a whole multiple of dt={dt} s"
        )
    return s


@dataclass(frozen=True, eq=False)
class TemperatureField:
    """Absolute temperature on the voxel grid, shape ``(nz, ny, nx)``."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 3:
            raise InvalidArgumentError("temperature field must be 3D (nz, ny, nx)")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("temperature field has non-finite values")
        if not np.all(v > 0):
            raise InvalidArgumentError("absolute temperature must be strictly positive")
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, grid, temperature):
        return cls(np.full(grid.shape, float(temperature)))


@dataclass(frozen=True, eq=False)
class TsfStack:
    """A measured or simulated thermal spread function.

    ``frames`` has shape ``(n_frames, ny, nx)``. ``temp_mode`` is ``"kelvin"``
    for absolute temperatures or ``"normalized"`` for ``(u - ambient) / rise``.
    """

    frames: np.ndarray
    capture: CaptureConfig
    grid: GridSpec
    temp_mode: str = "kelvin"

    def __post_init__(self):
        f = _frozen(self.frames)
        if f.ndim != 3:
            raise InvalidArgumentError("frames must be (n_frames, ny, nx)")
        if f.shape[0] != self.capture.n_frames:
            raise InvalidArgumentError(
                f"stack has {f.shape[0]} frames, capture declares {self.capture.n_frames}"
            )
        if f.shape[1:] != self.grid.surface_shape:
            raise InvalidArgumentError(
                f"frame shape {f.shape[1:]} != grid surface {self.grid.surface_shape}"
            )
        if not np.all(np.isfinite(f)):
            raise InvalidArgumentError("frames contain non-finite values")
        if self.temp_mode not in ("kelvin", "normalized"):
            raise InvalidArgumentError(f"unknown temp_mode {self.temp_mode!r}")
        if self.temp_mode == "kelvin" and not np.all(f > 0):
            raise InvalidArgumentError("kelvin frames must be strictly positive")
        object.__setattr__(self, "frames", f)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def rise(self):
        """Frames minus the pre-heating frame."""
        return self.frames - self.frames[0]

    def truncate(self, horizon_s):
        """Keep only frames captured at ``t <= horizon_s``."""
        n = int(np.floor(horizon_s / self.capture.frame_dt_s + 1e-9)) + 1
        n = min(max(n, 1), self.n_frames)
        s = substeps_per_frame(self.capture.frame_dt_s, self.grid.dt)
        cap = replace(
            self.capture, n_frames=n, t_on_s=min(self.capture.t_on_s, (n - 1) * self.capture.frame_dt_s)
        )
        grid = replace(self.grid, n_steps=(n - 1) * s)
        return TsfStack(self.frames[:n], cap, grid, self.temp_mode)


@dataclass(frozen=True, eq=False)
class ParamMaps:
    """Per-pixel diffusivity ``k`` (m^2/s) and absorption factor ``eps_prime``."""

    k: np.ndarray
    eps_prime: np.ndarray

    def __post_init__(self):
        k = _frozen(self.k)
        e = _frozen(self.eps_prime)
        if k.ndim != 2 or k.shape != e.shape:
            raise InvalidArgumentError("k and eps_prime must be 2D maps of equal shape")
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(e))):
            raise InvalidArgumentError("parameter maps must be finite")
        if np.any(k < 0) or np.any(e < 0):
            raise InvalidArgumentError("k and eps_prime must be non-negative")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "eps_prime", e)

    @classmethod
    def uniform(cls, grid, k, eps_prime):
        return cls(np.full(grid.surface_shape, float(k)), np.full(grid.surface_shape, float(eps_prime)))

    @property
    def shape(self):
        return self.k.shape


@dataclass(frozen=True)
class SourceModel:
    """Gaussian beam switched on for ``t_on_s`` seconds.

    The profile is evaluated at voxel centers, so fractional centers are fine.
    Flux is deposited in the ``z = 0`` layer only.
    """

    amplitude: float = 1.0
    center_x: float = 0.0
    center_y: float = 0.0
    sigma_px: float = 2.0
    t_on_s: float = 20.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise InvalidArgumentError("amplitude must be >= 0")
        if not self.sigma_px > 0:
            raise InvalidArgumentError("sigma_px must be > 0")
        if self.t_on_s < 0:
            raise InvalidArgumentError("t_on_s must be >= 0")

    def spatial(self, shape):
        """Profile ``f_s`` on a ``(ny, nx)`` surface."""
        ny, nx = shape
        y = np.arange(ny, dtype=np.float64)[:, None] - self.center_y
        x = np.arange(nx, dtype=np.float64)[None, :] - self.center_x
        return self.amplitude * np.exp(-(x * x + y * y) / (2.0 * self.sigma_px**2))

    def is_on(self, t):
        return t <= self.t_on_s

    def at(self, shape, t):
        """Profile at time ``t``: ``f_s`` while on, zeros after ``t_on_s``."""
        if self.is_on(t):
            return self.spatial(shape)
        return np.zeros(shape)


@dataclass(frozen=True)
class EmissivityComponents:
    """Bulk and optical constants that fold into ``k`` and ``eps_prime``."""

    beta: float
    eps_hs: float
    eps: float
    c: float
    rho: float
    sigma0: float

    def __post_init__(self):
        if not (self.c > 0 and self.rho > 0 and self.sigma0 > 0):
            raise InvalidArgumentError("c, rho and sigma0 must be > 0")
        if not 0.0 <= self.eps_hs <= 1.0:
            raise InvalidArgumentError("eps_hs must lie in [0, 1]")
        if not 0.0 < self.eps <= 1.0:
            raise InvalidArgumentError("eps must lie in (0, 1]")
        if not np.isclose(self.beta, 1.0 / (self.c * self.rho), rtol=1e-12, atol=0.0):
            raise InvalidArgumentError("beta must equal 1/(c*rho)")

    @classmethod
    def from_bulk(cls, c, rho, sigma0, eps_hs, eps):
        return cls(1.0 / (c * rho), eps_hs, eps, c, rho, sigma0)

    @property
    def k(self):
        return self.sigma0 / (self.c * self.rho)


def diffusivity_from_bulk(sigma0, c, rho):
    """Thermal diffusivity ``sigma0 / (c * rho)`` in m^2/s."""
    if not (sigma0 > 0 and c > 0 and rho > 0):
        raise InvalidArgumentError("conductivity, specific heat and density must be > 0")
    return sigma0 / (c * rho)


def eps_prime_from_components(comp):
    """Absorption factor ``beta * eps_hs * eps**(1/4)``."""
    if not comp.eps > 0:
        raise InvalidArgumentError("eps must be > 0")
    return comp.beta * comp.eps_hs * comp.eps**0.25


def true_temp_from_camera(u_c, eps):
    """Convert a black-body-referred camera reading to true temperature.

    Works elementwise on arrays; ``eps`` must lie in ``(0, 1]``.
    """
    eps_a = np.asarray(eps, dtype=np.float64)
    u_a = np.asarray(u_c, dtype=np.float64)
    if np.any(eps_a <= 0) or np.any(eps_a > 1):
        raise InvalidArgumentError("emissivity must lie in (0, 1]")
    if np.any(u_a <= 0):
        raise InvalidArgumentError("camera temperature must be > 0 K")
    out = eps_a**-0.25 * u_a
    return float(out) if out.ndim == 0 else out
