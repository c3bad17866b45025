"""Synthetic reference scenes used by tests, demos and the CLI.

The wood scene mirrors the simulated ground truth setup: 0.5 mm voxels,
dt = 0.25 s, 40 s of capture with the beam on for the first 20 s, and the
ANSYS library wood (rho = 700 kg/m^3, c = 2310 J/(kg K), sigma = 0.173 W/(m K)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import CaptureConfig, GridSpec, ParamMaps, SourceModel, diffusivity_from_bulk

__all__ = ["Scene", "WOOD_K", "wood_scene", "add_noise"]

WOOD_K = diffusivity_from_bulk(0.173, 2310.0, 700.0)


@dataclass(frozen=True)
class Scene:
    grid: GridSpec
    capture: CaptureConfig
    source: SourceModel
    params: ParamMaps


def wood_scene(nx=64, ny=64, nz=24, pitch=5e-4, dt=0.25, frame_dt=0.25, horizon_s=40.0,
               t_on_s=20.0, k=WOOD_K, eps_prime=1.0, sigma_px=2.0, amplitude=1.0,
               ambient_K=293.15, center=None):
    """Uniform slab heated by a centred Gaussian beam.

    The full-size domain is 100 x 100 x 60 voxels (50 x 50 x 30 mm); the
    default here is the reduced 64 x 64 x 24 grid.
    """
    n_frames = int(round(horizon_s / frame_dt)) + 1
    cap = CaptureConfig(t_on_s, frame_dt, n_frames, ambient_K)
    grid = GridSpec.for_capture(nx, ny, nz, pitch, dt, cap)
    if center is None:
        center = ((nx - 1) / 2.0, (ny - 1) / 2.0)
    src = SourceModel(amplitude, center[0], center[1], sigma_px, t_on_s)
    return Scene(grid, cap, src, ParamMaps.uniform(grid, k, eps_prime))


def add_noise(stack, sigma_K, rng):
    """Additive i.i.d. Gaussian noise on every pixel of every frame."""
    from .domain import TsfStack

    if sigma_K <= 0:
        return stack
    noisy = stack.frames + rng.normal(0.0, sigma_K, size=stack.frames.shape)
    return TsfStack(noisy, stack.capture, stack.grid, stack.temp_mode)
