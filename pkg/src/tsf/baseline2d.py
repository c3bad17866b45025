"""Image-only curve fitting of ``u_t = k * lap2d(u) + eps_prime * f``.

This is the surface-data approach: both derivatives come straight from the
frames, so the depth term ``u_zz`` is missing. On real 3D stacks that
missing term shows up as a ring-shaped (donut) bias in ``k`` around the
beam. It is kept as a comparison point for the inverse solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import ParamMaps
from .errors import InvalidArgumentError

__all__ = ["BaselineFit", "temporal_derivative", "laplacian2d", "fit_pixelwise"]


@dataclass(frozen=True, eq=False)
class BaselineFit:
    """Per-pixel least-squares result.

    ``k`` and ``eps_prime`` are the raw solutions and may be negative where
    the 2D model is badly wrong; ``params`` clips them at zero. ``mask`` marks
    pixels whose 2x2 normal equations were singular.
    """

    k: np.ndarray
    eps_prime: np.ndarray
    mask: np.ndarray
    frames_used: str = "all"

    @property
    def params(self):
        return ParamMaps(np.clip(self.k, 0, None), np.clip(self.eps_prime, 0, None))


def temporal_derivative(stack):
    """Forward differences ``(frames[t+1] - frames[t]) / frame_dt_s``."""
    if stack.n_frames < 2:
        raise InvalidArgumentError("need at least two frames for a time derivative")
    return np.diff(stack.frames, axis=0) / stack.capture.frame_dt_s


def laplacian2d(frame, grid):
    """Five-point Laplacian with replicate ghosts; needs ``dx == dy``."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-2:] != grid.surface_shape:
        raise InvalidArgumentError(f"frame shape {frame.shape} != grid surface {grid.surface_shape}")
    if not np.isclose(grid.dx, grid.dy, rtol=1e-12, atol=0.0):
        raise InvalidArgumentError("2D baseline assumes isotropic pitch (dx == dy)")
    pad = [(0, 0)] * (frame.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(frame, pad, mode="edge")
    c = p[..., 1:-1, 1:-1]
    return (p[..., 1:-1, 2:] + p[..., 1:-1, :-2] + p[..., 2:, 1:-1] + p[..., :-2, 1:-1] - 4.0 * c) / grid.dx**2


def fit_pixelwise(stack, src):
    """Fit ``(k, eps_prime)`` independently at every pixel.

    Regressors are the 2D Laplacian of frame ``t`` and the source profile
    (zero once ``t > t_on``); the response is the forward difference from
    frame ``t`` to ``t + 1``. Every frame pair enters the fit.
    """
    if stack.n_frames < 3:
        raise InvalidArgumentError("need at least three frames to fit two parameters")
    y = temporal_derivative(stack)
    a = laplacian2d(stack.frames[:-1], stack.grid)
    t = np.arange(stack.n_frames - 1) * stack.capture.frame_dt_s
    on = (t <= src.t_on_s + 1e-9 * stack.capture.frame_dt_s).astype(np.float64)
    f_s = src.spatial(stack.grid.surface_shape)
    b = on[:, None, None] * f_s[None]

    g00 = np.sum(a * a, axis=0)
    g01 = np.sum(a * b, axis=0)
    g11 = np.sum(b * b, axis=0)
    r0 = np.sum(a * y, axis=0)
    r1 = np.sum(b * y, axis=0)
    det = g00 * g11 - g01 * g01
    mask = det <= 1e-12 * g00 * g11
    safe = np.where(mask, 1.0, det)
    k = np.where(mask, 0.0, (g11 * r0 - g01 * r1) / safe)
    e = np.where(mask, 0.0, (g00 * r1 - g01 * r0) / safe)
    return BaselineFit(k, e, mask)
