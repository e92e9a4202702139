"""Site-signature potential surfaces."""

import numpy as np
import pytest

from apmkit.errors import DataError, EmptyInputError
from apmkit.lamap import (
    Ecdf,
    LamapConfig,
    build_site_model,
    build_site_models,
    lamap_surface,
    potential_values,
    similarity,
)
from apmkit.raster.sites import SiteRecord


def site(sid, x, y, polarity="positive"):
    return SiteRecord(sid, x, y, "Roman Imperial", polarity)


def count_cdf(samples, v):
    """Independent midrank oracle: (#{s < v} + 0.5 #{s == v}) / n."""
    s = np.asarray(samples, dtype=float)
    return (np.sum(s < v) + 0.5 * np.sum(s == v)) / s.size


class TestEcdf:
    def test_midrank_on_distinct_samples(self):
        e = Ecdf([1, 2, 3, 4, 5])
        for v in (0.0, 1.0, 2.5, 3.0, 4.0, 5.0, 9.0):
            assert e.cdf(v) == count_cdf([1, 2, 3, 4, 5], v)
        assert e.cdf(3.0) == 0.5
        assert e.cdf(4.0) == 0.7

    def test_midrank_with_ties(self, rng):
        samples = rng.integers(0, 5, size=40).astype(float)
        e = Ecdf(samples)
        for v in np.unique(samples):
            assert e.cdf(v) == pytest.approx(count_cdf(samples, v), abs=1e-15)

    def test_vectorized_matches_scalar(self, rng):
        samples = rng.normal(size=25)
        e = Ecdf(samples)
        query = rng.normal(size=(4, 5))
        out = e.cdf(query)
        for idx in np.ndindex(query.shape):
            assert out[idx] == e.cdf(float(query[idx]))

    def test_empty_and_nonfinite(self):
        with pytest.raises(EmptyInputError):
            Ecdf([])
        with pytest.raises(DataError):
            Ecdf([1.0, np.nan])

    def test_single_sample(self):
        e = Ecdf([7.0])
        assert e.n == 1
        assert e.cdf(7.0) == 0.5


class TestSimilarity:
    def test_median_scores_one(self):
        e = Ecdf([1, 2, 3, 4, 5])
        assert similarity(e, 3.0) == 1.0

    def test_upper_quantile(self):
        # F(4) = 0.7 on {1..5}, so centrality is 1 - |2*0.7 - 1| = 0.6.
        e = Ecdf([1, 2, 3, 4, 5])
        assert similarity(e, 4.0) == pytest.approx(0.6, abs=1e-15)

    def test_tails_score_zero(self):
        e = Ecdf([1, 2, 3, 4, 5])
        assert similarity(e, -10.0) == 0.0
        assert similarity(e, 10.0) == 0.0

    def test_range_and_symmetry(self, rng):
        samples = rng.normal(size=31)
        e = Ecdf(samples)
        vals = rng.normal(size=200) * 3
        u = similarity(e, vals)
        assert np.all((u >= 0.0) & (u <= 1.0))


class TestSiteModel:
    def test_constant_band(self, make_grid):
        grid = make_grid(np.full((9, 9), 4.5))
        model = build_site_model(grid, site("a", 4.5, -4.5), LamapConfig(2.0))
        assert np.array_equal(model.ecdfs[0].samples, np.full(13, 4.5))
        assert model.catchment_pixels == 13

    def test_subpixel_radius_single_sample(self, make_grid):
        values = np.arange(25.0).reshape(5, 5)
        grid = make_grid(values)
        model = build_site_model(grid, site("a", 2.5, -2.5), LamapConfig(0.2))
        assert model.catchment_pixels == 1
        assert model.ecdfs[0].samples.tolist() == [values[2, 2]]

    def test_masked_catchment_raises(self, make_grid):
        grid = make_grid(np.ones((5, 5)), mask=np.ones((5, 5), dtype=bool))
        with pytest.raises(EmptyInputError, match="a"):
            build_site_model(grid, site("a", 2.5, -2.5), LamapConfig(1.0))

    def test_mask_excluded_from_samples(self, make_grid):
        values = np.arange(25.0).reshape(5, 5)
        mask = np.zeros((5, 5), dtype=bool)
        mask[2, 3] = True
        grid = make_grid(values, mask=mask)
        model = build_site_model(grid, site("a", 2.5, -2.5), LamapConfig(1.0))
        assert values[2, 3] not in model.ecdfs[0].samples
        assert model.catchment_pixels == 4

    def test_one_ecdf_per_selected_band(self, make_grid, rng):
        grid = make_grid(rng.normal(size=(3, 6, 6)))
        model = build_site_model(grid, site("a", 3.0, -3.0), LamapConfig(2.0))
        assert len(model.ecdfs) == 3
        sub = build_site_model(grid, site("a", 3.0, -3.0), LamapConfig(2.0, bands=(2,)))
        assert len(sub.ecdfs) == 1
        assert np.array_equal(sub.ecdfs[0].samples, np.sort(model.ecdfs[2].samples))


def brute_force_potential(stack, models, cfg):
    """Triple-loop reference: pixels x sites x bands, float64 throughout."""
    bands = cfg.bands if cfg.bands is not None else tuple(range(stack.bands))
    ox, oy, pw, ph = stack.geotransform
    h, w = stack.shape
    out = np.full((h, w), np.nan)
    for r in range(h):
        for c in range(w):
            if stack.nodata_mask[r, c]:
                continue
            px = ox + (c + 0.5) * pw
            py = oy + (r + 0.5) * ph
            num = den = 0.0
            for m in models:
                d = float(np.hypot(px - m.x, py - m.y))
                wgt = float(np.exp(-d / cfg.kernel_bandwidth))
                u = 0.0
                for ecdf, b in zip(m.ecdfs, bands):
                    f = count_cdf(ecdf.samples, stack.band(b)[r, c])
                    u += 1.0 - abs(2.0 * f - 1.0)
                num += wgt * u / len(bands)
                den += wgt
            out[r, c] = min(max(num / den, 0.0), 1.0)
    return out


class TestPotential:
    def test_matches_brute_force(self, make_grid, rng):
        for trial in range(4):
            h, w = (int(v) for v in rng.integers(6, 16, size=2))
            nb = int(rng.integers(1, 4))
            values = rng.normal(size=(nb, h, w))
            mask = rng.random((h, w)) < 0.1
            mask[h // 2, w // 2] = False
            grid = make_grid(values, mask=mask)
            cfg = LamapConfig(catchment_radius=2.5, kernel_bandwidth=5.0)
            sites = [
                site(f"s{i}", float(rng.uniform(1, w - 1)), float(-rng.uniform(1, h - 1)))
                for i in range(int(rng.integers(1, 5)))
            ]
            models = build_site_models(grid, sites, cfg)
            got = potential_values(grid, models, cfg)
            want = brute_force_potential(grid, models, cfg)
            assert np.allclose(got, want, atol=1e-9, equal_nan=True)

    def test_range_and_mask(self, make_grid, rng):
        values = rng.normal(size=(2, 12, 12)) * 10
        mask = np.zeros((12, 12), dtype=bool)
        mask[0, :] = True
        grid = make_grid(values, mask=mask)
        cfg = LamapConfig(3.0, 2.0)
        models = build_site_models(grid, [site("a", 6.0, -6.0), site("b", 2.0, -9.0)], cfg)
        out = potential_values(grid, models, cfg)
        assert np.isnan(out[0]).all()
        ok = out[~mask]
        assert np.all((ok >= 0.0) & (ok <= 1.0))

    def test_site_order_is_bit_irrelevant(self, make_grid, rng):
        grid = make_grid(rng.normal(size=(10, 10)))
        cfg = LamapConfig(2.0, 3.0)
        sites = [site(f"s{i}", 1.0 + 2.0 * i, -5.0) for i in range(4)]
        models = build_site_models(grid, sites, cfg)
        a = potential_values(grid, models, cfg)
        for _ in range(5):
            order = rng.permutation(len(models))
            b = potential_values(grid, [models[i] for i in order], cfg)
            assert np.array_equal(a, b, equal_nan=True)

    def test_single_site_reduces_to_similarity(self, make_grid, rng):
        # With one site the distance weight cancels out of the quotient.
        # Compare against the stored band: storage is float32, and midranks
        # care about exact ties.
        values = rng.normal(size=(8, 8))
        grid = make_grid(values)
        cfg = LamapConfig(2.0, 1.0)
        model = build_site_model(grid, site("a", 4.0, -4.0), cfg)
        out = potential_values(grid, [model], cfg)
        want = similarity(model.ecdfs[0], grid.band(0).astype(np.float64))
        assert np.allclose(out, want, atol=1e-12)

    def test_nearby_site_dominates(self, make_grid):
        # Two sites with opposite affinity for a probe value; short bandwidth
        # means each corner tracks its own neighbour.
        values = np.zeros((3, 21))
        values[:, :1] = 5.0
        grid = make_grid(values)
        cfg = LamapConfig(catchment_radius=1.0, kernel_bandwidth=0.5)
        left = build_site_model(grid, site("l", 0.5, -1.5), cfg)
        right = build_site_model(grid, site("r", 20.5, -1.5), cfg)
        out = potential_values(grid, [left, right], cfg)
        # Probe pixel value 0: right site's ECDF is all zeros (u = 1), the
        # left site saw the 5.0 column too.
        assert out[1, 19] > out[1, 2]

    def test_band_count_mismatch(self, make_grid, rng):
        grid = make_grid(rng.normal(size=(2, 6, 6)))
        cfg1 = LamapConfig(2.0, bands=(0,))
        models = build_site_models(grid, [site("a", 3.0, -3.0)], cfg1)
        with pytest.raises(DataError):
            potential_values(grid, models, LamapConfig(2.0))

    def test_no_models(self, make_grid):
        with pytest.raises(DataError):
            potential_values(make_grid(np.ones((4, 4))), [], LamapConfig(1.0))

    def test_band_subset(self, make_grid, rng):
        base = rng.normal(size=(6, 6))
        noise = rng.normal(size=(6, 6)) * 100
        grid = make_grid(np.stack([base, noise]))
        only_first = LamapConfig(2.0, bands=(0,))
        models = build_site_models(grid, [site("a", 3.0, -3.0)], only_first)
        got = potential_values(grid, models, only_first)
        solo = make_grid(base)
        want = potential_values(solo, build_site_models(solo, [site("a", 3.0, -3.0)], LamapConfig(2.0)), LamapConfig(2.0))
        assert np.allclose(got, want, atol=1e-12)


class TestSurfaceWrapper:
    def test_float32_single_band(self, make_grid, rng):
        grid = make_grid(rng.normal(size=(7, 7)))
        cfg = LamapConfig(2.0)
        models = build_site_models(grid, [site("a", 3.5, -3.5)], cfg)
        surf = lamap_surface(grid, models, cfg)
        assert surf.bands == 1
        assert surf.data.dtype == np.float32
        assert surf.band_names == ("potential",)
        assert surf.geotransform == grid.geotransform
        assert np.allclose(
            surf.band(0), potential_values(grid, models, cfg).astype(np.float32)
        )

    def test_config_validation(self):
        with pytest.raises(DataError):
            LamapConfig(catchment_radius=-1.0)
        with pytest.raises(DataError):
            LamapConfig(kernel_bandwidth=0.0)
