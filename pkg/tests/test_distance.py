"""Exact Euclidean distance transform and target distance maps."""

import json

import numpy as np
import pytest

from apmkit.errors import DataError, EmptyInputError
from apmkit.raster.distance import (
    distance_map,
    distance_to_mask,
    load_targets,
    rasterize_lines,
    rasterize_points,
)


def brute_force_distance(target, dx, dy):
    """O(N * M) scan over every (pixel, target) pair."""
    rows, cols = np.nonzero(target)
    h, w = target.shape
    out = np.empty((h, w))
    for r in range(h):
        for c in range(w):
            dr = (rows - r) * dy
            dc = (cols - c) * dx
            out[r, c] = np.sqrt((dr * dr + dc * dc).min())
    return out


class TestDistanceToMask:
    def test_single_target_pythagoras(self):
        target = np.zeros((10, 12), bool)
        target[0, 0] = True
        d = distance_to_mask(target, 1.0, 1.0)
        assert d[0, 0] == 0.0
        assert d[6, 8] == pytest.approx(10.0)
        assert d[3, 4] == pytest.approx(5.0)

    def test_all_targets_all_zero(self):
        d = distance_to_mask(np.ones((5, 7), bool), 2.0, 3.0)
        assert np.all(d == 0.0)

    def test_matches_brute_force_random(self, rng):
        for _ in range(20):
            h, w = rng.integers(2, 30, size=2)
            target = rng.uniform(size=(h, w)) < 0.1
            if not target.any():
                target[0, 0] = True
            d = distance_to_mask(target, 1.0, 1.0)
            assert np.allclose(d, brute_force_distance(target, 1.0, 1.0), atol=1e-6)

    def test_matches_brute_force_anisotropic(self, rng):
        target = rng.uniform(size=(17, 23)) < 0.05
        target[4, 9] = True
        d = distance_to_mask(target, 30.0, -10.0)
        assert np.allclose(d, brute_force_distance(target, 30.0, 10.0), atol=1e-6)

    def test_empty_target_raises(self):
        with pytest.raises(EmptyInputError):
            distance_to_mask(np.zeros((4, 4), bool), 1.0, 1.0)


class TestTargetGeometry:
    def test_points_mark_containing_pixels(self, make_grid):
        g = make_grid(np.zeros((4, 5)), geotransform=(0.0, 0.0, 10.0, -10.0))
        mask = rasterize_points(g, [(5.0, -5.0), (49.9, -39.9), (500.0, -5.0)])
        assert mask[0, 0] and mask[3, 4]
        assert mask.sum() == 2  # the far point is off-grid and ignored

    def test_lines_traverse_pixels(self, make_grid):
        g = make_grid(np.zeros((5, 5)))
        mask = rasterize_lines(g, [[(0.5, -0.5), (4.5, -4.5)]])
        # The main diagonal must be fully traversed.
        assert all(mask[i, i] for i in range(5))

    def test_line_needs_two_vertices(self, make_grid):
        g = make_grid(np.zeros((3, 3)))
        with pytest.raises(DataError):
            rasterize_lines(g, [[(1.0, -1.0)]])

    def test_load_targets(self, tmp_path):
        path = tmp_path / "t.json"
        path.write_text(json.dumps({"points": [[1, 2]], "lines": [[[0, 0], [3, 3]]]}))
        points, lines = load_targets(path)
        assert points == [(1.0, 2.0)]
        assert lines == [[(0.0, 0.0), (3.0, 3.0)]]


class TestDistanceMap:
    def test_two_targets_pointwise_minimum(self, make_grid):
        g = make_grid(np.zeros((12, 12)))
        a = distance_map(g, points=[(2.5, -2.5)]).band(0)
        b = distance_map(g, points=[(9.5, -8.5)]).band(0)
        both = distance_map(g, points=[(2.5, -2.5), (9.5, -8.5)]).band(0)
        assert np.allclose(both, np.minimum(a, b), atol=1e-6)

    def test_zero_on_targets_and_band_name(self, make_grid):
        g = make_grid(np.zeros((6, 6)))
        d = distance_map(g, points=[(3.5, -2.5)], band_name="dist_roads")
        assert d.band_names == ("dist_roads",)
        assert d.band(0)[2, 3] == 0.0

    def test_no_inside_targets_raises(self, make_grid):
        g = make_grid(np.zeros((4, 4)))
        with pytest.raises(EmptyInputError):
            distance_map(g, points=[(100.0, 100.0)])
        with pytest.raises(EmptyInputError):
            distance_map(g)

    def test_mask_carried_from_grid(self, make_grid):
        mask = np.zeros((4, 4), bool)
        mask[1, 1] = True
        g = make_grid(np.zeros((4, 4)), mask=mask)
        d = distance_map(g, points=[(0.5, -0.5)])
        assert np.isnan(d.band(0)[1, 1])
        assert d.nodata_mask[1, 1]
