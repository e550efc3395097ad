import numpy as np
import pytest

from mobflow import grid as grid_mod
from mobflow.grid import DensityField, Grid
from mobflow.model import ModelParams


@pytest.fixture(autouse=True)
def _residual_contracts():
    """Re-check every elliptic residual contract while tests run."""
    saved = grid_mod.debug_check_residuals
    grid_mod.debug_check_residuals = True
    yield
    grid_mod.debug_check_residuals = saved


@pytest.fixture
def grid64():
    return Grid((1.0,), (64,))


@pytest.fixture
def grid2d():
    return Grid((1.0, 1.0), (16, 16))


@pytest.fixture
def params():
    return ModelParams(p=1.5, alpha=0.5, chi=1.0, dim=1, eps=1e-2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def make_probability(grid, rng, smooth=True):
    """Random strictly positive probability density on a grid."""
    if smooth:
        values = np.ones(grid.shape)
        for a in range(grid.dim):
            x = grid.axis_centers(a) / grid.extents[a]
            amp = rng.uniform(-0.4, 0.4, size=3)
            prof = 1.0 + sum(amp[m] * np.cos((m + 1) * np.pi * x) for m in range(3))
            shape = [1] * grid.dim
            shape[a] = grid.cells[a]
            values = values * prof.reshape(shape)
        values = np.abs(values) + 0.1
    else:
        values = rng.uniform(0.05, 1.0, size=grid.shape)
    values /= values.sum() * grid.cell_volume
    return DensityField(grid, values)
