"""Shared fixtures: seeded generators and small raster builders."""

import numpy as np
import pytest

from apmkit.raster.grid import RasterGrid


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_grid():
    """Build a RasterGrid from a 2-D or 3-D array with unit pixels."""

    def _make(values, geotransform=(0.0, 0.0, 1.0, -1.0), mask=None, band_names=None):
        return RasterGrid.from_array(values, geotransform, mask, band_names)

    return _make
