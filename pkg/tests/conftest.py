import numpy as np
import pytest

from tsf.domain import CaptureConfig, GridSpec, ParamMaps, SourceModel


def small_scene(nx=8, ny=8, nz=4, n_frames=11, dt=0.25, frame_dt=0.25, t_on=1.25, k=1.069e-7,
                eps=2.0, pitch=5e-4, sigma_px=1.5, ambient=293.15, center=None):
    """Grid, capture, source and uniform maps for a small heated slab."""
    cap = CaptureConfig(t_on, frame_dt, n_frames, ambient)
    grid = GridSpec.for_capture(nx, ny, nz, pitch, dt, cap)
    if center is None:
        center = ((nx - 1) / 2.0, (ny - 1) / 2.0)
    src = SourceModel(1.0, center[0], center[1], sigma_px, t_on)
    return grid, cap, src, ParamMaps.uniform(grid, k, eps)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
