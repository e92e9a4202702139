"""Pseudolabel mixing and the combined semi-supervised objective."""

import numpy as np
import pytest

from apmkit.errors import ConfigError, DataError
from apmkit.pseudolabel import (
    BranchPair,
    DplConfig,
    binary_entropy,
    combine,
    confident_pseudolabel,
    consistency,
    dpl_objective,
    ramp_weight,
    seg_loss,
)

# Hand-computed on pred (0.9, 0.1, 0.8, 0.2) vs target (1, 0, 1, 0).
PRED4 = np.array([[0.9, 0.1], [0.8, 0.2]])
TARG4 = np.array([[1.0, 0.0], [1.0, 0.0]])
FOCAL4 = 0.004989673604573325
CE4 = 0.164252033486018
CE4_W21 = 0.24637805022902698
DICE4 = 0.11999999999999988
TVERSKY4 = 0.09999999999999998


def pair_of(make_grid, a, b, mask1=None, mask2=None):
    return BranchPair(make_grid(a, mask=mask1), make_grid(b, mask=mask2))


class TestConfig:
    def test_defaults_and_ramp_steps(self):
        cfg = DplConfig()
        assert cfg.loss_kind == "dice"
        assert cfg.confidence_tau == 0.8
        assert cfg.ramp_steps == 250
        assert DplConfig(ramp_fraction=0.001, total_steps=100).ramp_steps == 1

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"loss_kind": "hinge"},
            {"confidence_tau": 0.5},
            {"confidence_tau": 0.96},
            {"lambda_p": -1.0},
            {"ramp_fraction": 0.0},
            {"ramp_fraction": 1.5},
            {"total_steps": 0},
            {"class_weights": (1.0, -1.0)},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            DplConfig(**kwargs)

    def test_construct_from_json_dict(self):
        cfg = DplConfig(**{"loss_kind": "focal", "class_weights": [2.0, 1.0]})
        assert cfg.class_weights == (2.0, 1.0)


class TestCombine:
    def test_convex_mixture(self, make_grid, rng):
        a = rng.random((6, 6)).astype(np.float32)
        b = rng.random((6, 6)).astype(np.float32)
        pair = pair_of(make_grid, a, b)
        mixed = combine(pair, alpha=0.25)
        want = np.float32(0.25) * a + np.float32(0.75) * b
        assert np.array_equal(mixed.band(0), want)
        assert mixed.meta["alpha"] == 0.25

    def test_endpoints_bit_exact(self, make_grid, rng):
        a = rng.random((5, 7)).astype(np.float32)
        b = rng.random((5, 7)).astype(np.float32)
        pair = pair_of(make_grid, a, b)
        assert np.array_equal(combine(pair, alpha=1.0).band(0), a)
        assert np.array_equal(combine(pair, alpha=0.0).band(0), b)

    def test_random_alpha_needs_rng(self, make_grid, rng):
        pair = pair_of(make_grid, np.zeros((3, 3)), np.ones((3, 3)))
        with pytest.raises(ConfigError):
            combine(pair)
        m = combine(pair, rng=np.random.default_rng(7))
        assert 0.0 <= m.meta["alpha"] < 1.0

    def test_alpha_range(self, make_grid):
        pair = pair_of(make_grid, np.zeros((3, 3)), np.ones((3, 3)))
        with pytest.raises(DataError):
            combine(pair, alpha=1.5)

    def test_mask_union(self, make_grid, rng):
        m1 = np.zeros((4, 4), dtype=bool)
        m1[0, 0] = True
        m2 = np.zeros((4, 4), dtype=bool)
        m2[3, 3] = True
        pair = pair_of(make_grid, rng.random((4, 4)), rng.random((4, 4)), m1, m2)
        assert combine(pair, alpha=0.5).nodata_mask[0, 0]
        assert combine(pair, alpha=0.5).nodata_mask[3, 3]

    def test_frame_mismatch(self, make_grid, rng):
        g1 = make_grid(rng.random((4, 4)))
        g2 = make_grid(rng.random((4, 5)))
        with pytest.raises(DataError):
            BranchPair(g1, g2)


class TestConfidentPseudolabel:
    def test_threshold_masks_uncertain(self, make_grid):
        a = np.array([[0.95, 0.5], [0.05, 0.7]])
        pair = pair_of(make_grid, a, a)
        out = confident_pseudolabel(pair, DplConfig(confidence_tau=0.9), alpha=0.5)
        keep = ~out.nodata_mask
        assert keep.tolist() == [[True, False], [True, False]]
        assert np.isnan(out.band(0)[0, 1])
        assert out.meta["confidence_tau"] == 0.9


class TestRamp:
    def test_frozen_values(self):
        assert ramp_weight(0, 100, 1.0) == pytest.approx(0.006737946999085467, abs=1e-15)
        assert ramp_weight(50, 100, 1.0) == pytest.approx(0.2865047968601901, abs=1e-15)
        assert ramp_weight(100, 100, 1.0) == 1.0
        assert ramp_weight(500, 100, 1.0) == 1.0
        assert ramp_weight(0, 100, 0.1) == pytest.approx(0.0006737946999085467, abs=1e-16)

    def test_monotone(self):
        vals = [ramp_weight(s, 40, 2.0) for s in range(0, 60)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_validation(self):
        with pytest.raises(DataError):
            ramp_weight(-1, 10, 1.0)
        with pytest.raises(ConfigError):
            ramp_weight(0, 0, 1.0)


class TestEntropyAndConsistency:
    def test_frozen_entropy(self, make_grid):
        assert binary_entropy(np.array([0.25, 0.75])) == pytest.approx(
            0.5623351446188083, abs=1e-12
        )
        assert binary_entropy(np.array([0.5])) == pytest.approx(
            np.log(2.0), abs=1e-12
        )

    def test_extremes_are_clamped(self):
        val = binary_entropy(np.array([0.0, 1.0]))
        assert 0.0 < val < 1e-5

    def test_raster_mask_respected(self, make_grid):
        mask = np.array([[False, True]])
        grid = make_grid(np.array([[0.5, 0.99]]), mask=mask)
        assert binary_entropy(grid) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_fully_masked(self, make_grid):
        grid = make_grid(np.ones((2, 2)), mask=np.ones((2, 2), dtype=bool))
        with pytest.raises(DataError):
            binary_entropy(grid)

    def test_consistency_mse(self, make_grid):
        pair = pair_of(
            make_grid, np.array([[0.2, 0.4]]), np.array([[0.5, 0.4]])
        )
        assert consistency(pair) == pytest.approx(0.5 * 0.3**2, abs=1e-7)

    def test_identical_branches_zero(self, make_grid, rng):
        a = rng.random((5, 5))
        assert consistency(pair_of(make_grid, a, a)) == 0.0


class TestSegLoss:
    def test_focal_frozen(self):
        assert seg_loss("focal", PRED4, TARG4) == pytest.approx(FOCAL4, abs=1e-9)

    def test_weighted_ce_frozen(self):
        assert seg_loss("weighted-ce", PRED4, TARG4) == pytest.approx(CE4, abs=1e-9)
        assert seg_loss(
            "weighted-ce", PRED4, TARG4, class_weights=(2.0, 1.0)
        ) == pytest.approx(CE4_W21, abs=1e-9)

    def test_dice_frozen(self):
        assert seg_loss("dice", PRED4, TARG4) == pytest.approx(DICE4, abs=1e-9)

    def test_tversky_frozen(self):
        assert seg_loss("tversky", PRED4, TARG4) == pytest.approx(TVERSKY4, abs=1e-9)

    def test_dice_focal_is_sum(self):
        assert seg_loss("dice-focal", PRED4, TARG4) == pytest.approx(
            DICE4 + FOCAL4, abs=1e-9
        )

    def test_perfect_prediction_near_zero(self):
        t = np.array([1.0, 0.0, 1.0])
        for kind in ("weighted-ce", "focal"):
            assert seg_loss(kind, t, t) < 1e-5
        # Overlap losses keep a smoothing floor but stay small.
        assert seg_loss("dice", t, t) < 0.2

    def test_select_subset(self):
        sel = np.array([[True, True], [False, False]])
        got = seg_loss("weighted-ce", PRED4, TARG4, select=sel)
        want = -(np.log(0.9) + np.log(0.9)) / 2.0
        assert got == pytest.approx(want, abs=1e-9)

    def test_validation(self):
        with pytest.raises(ConfigError):
            seg_loss("hinge", PRED4, TARG4)
        with pytest.raises(DataError):
            seg_loss("dice", PRED4, TARG4[:1])
        with pytest.raises(DataError):
            seg_loss("dice", PRED4, TARG4, select=np.zeros((2, 2), dtype=bool))


class TestObjective:
    def make_labeled(self, make_grid, rng):
        pred1 = make_grid(rng.random((6, 6)).astype(np.float32))
        pred2 = make_grid(rng.random((6, 6)).astype(np.float32))
        label_mask = rng.random((6, 6)) > 0.4
        labels = np.where(label_mask, (rng.random((6, 6)) > 0.5).astype(float), np.nan)
        label_grid = make_grid(labels, mask=~label_mask)
        return pred1, pred2, label_grid

    def test_zero_lambdas_reduce_to_supervised(self, make_grid, rng):
        labeled = self.make_labeled(make_grid, rng)
        pairs = [pair_of(make_grid, rng.random((6, 6)), rng.random((6, 6)))]
        cfg = DplConfig(lambda_p=0.0, lambda_c_max=0.0, lambda_e_max=0.0)
        out = dpl_objective(labeled, pairs, cfg, step=500)
        assert out.total == out.supervised
        labeled_pixels = ~labeled[2].nodata_mask
        want = 0.5 * (
            seg_loss("dice", labeled[0], labeled[2], select=labeled_pixels)
            + seg_loss("dice", labeled[1], labeled[2], select=labeled_pixels)
        )
        assert out.supervised == pytest.approx(want, abs=1e-12)

    def test_total_is_linear_in_lambda_p(self, make_grid, rng):
        pairs = [pair_of(make_grid, rng.random((6, 6)), rng.random((6, 6)))]
        base = DplConfig(lambda_p=1.0, confidence_tau=0.7)
        bumped = DplConfig(lambda_p=1.0 + 1e-3, confidence_tau=0.7)
        lo = dpl_objective(None, pairs, base, step=10, alphas=[0.3])
        hi = dpl_objective(None, pairs, bumped, step=10, alphas=[0.3])
        slope = (hi.total - lo.total) / 1e-3
        assert slope == pytest.approx(lo.pseudolabel, abs=1e-9)

    def test_identical_branches_decomposition(self, make_grid):
        # Both branches at 0.9: no disagreement, and the pseudolabel term
        # is twice the single-branch loss against the shared pseudolabel.
        field = np.full((2, 1), 0.9)
        pair = pair_of(make_grid, field, field)
        cfg = DplConfig(loss_kind="dice", confidence_tau=0.7)
        out = dpl_objective(None, [pair], cfg, step=0, alphas=[0.4])
        assert out.consistency == 0.0
        want = 2.0 * seg_loss("dice", pair.y1, np.ones_like(field))
        assert out.pseudolabel == pytest.approx(want, abs=1e-12)

    def test_hard_targets_for_overlap_losses(self, make_grid, rng):
        y1 = rng.random((5, 5))
        y2 = rng.random((5, 5))
        pair = pair_of(make_grid, y1, y2)
        cfg = DplConfig(loss_kind="dice", confidence_tau=0.7)
        out = dpl_objective(None, [pair], cfg, step=0, alphas=[0.5])
        tilde = combine(pair, alpha=0.5).band(0).astype(np.float64)
        conf = np.maximum(tilde, 1.0 - tilde) >= 0.7
        hard = (tilde >= 0.5).astype(float)
        want = seg_loss("dice", pair.y1, hard, select=conf) + seg_loss(
            "dice", pair.y2, hard, select=conf
        )
        assert out.pseudolabel == pytest.approx(want, abs=1e-12)

    def test_soft_targets_for_log_losses(self, make_grid, rng):
        y1 = rng.random((5, 5))
        y2 = rng.random((5, 5))
        pair = pair_of(make_grid, y1, y2)
        cfg = DplConfig(loss_kind="focal", confidence_tau=0.7)
        out = dpl_objective(None, [pair], cfg, step=0, alphas=[0.5])
        tilde = combine(pair, alpha=0.5).band(0).astype(np.float64)
        conf = np.maximum(tilde, 1.0 - tilde) >= 0.7
        want = seg_loss("focal", pair.y1, tilde, select=conf) + seg_loss(
            "focal", pair.y2, tilde, select=conf
        )
        assert out.pseudolabel == pytest.approx(want, abs=1e-12)

    def test_unconfident_batch_contributes_zero(self, make_grid):
        lukewarm = np.full((3, 3), 0.6)
        pair = pair_of(make_grid, lukewarm, lukewarm)
        out = dpl_objective(
            None, [pair], DplConfig(confidence_tau=0.8), step=0, alphas=[0.5]
        )
        assert out.pseudolabel == 0.0
        assert out.consistency == 0.0
        assert out.entropy > 0.0

    def test_terms_average_over_batches(self, make_grid, rng):
        p1 = pair_of(make_grid, rng.random((4, 4)), rng.random((4, 4)))
        p2 = pair_of(make_grid, rng.random((4, 4)), rng.random((4, 4)))
        cfg = DplConfig(confidence_tau=0.7)
        a = dpl_objective(None, [p1], cfg, step=9, alphas=[0.3])
        b = dpl_objective(None, [p2], cfg, step=9, alphas=[0.8])
        both = dpl_objective(None, [p1, p2], cfg, step=9, alphas=[0.3, 0.8])
        assert both.pseudolabel == pytest.approx(
            (a.pseudolabel + b.pseudolabel) / 2, abs=1e-12
        )
        assert both.consistency == pytest.approx(
            (a.consistency + b.consistency) / 2, abs=1e-12
        )
        assert both.entropy == pytest.approx((a.entropy + b.entropy) / 2, abs=1e-12)

    def test_ramped_total_formula(self, make_grid, rng):
        pairs = [pair_of(make_grid, rng.random((4, 4)), rng.random((4, 4)))]
        cfg = DplConfig(lambda_c_max=2.0, lambda_e_max=0.5, confidence_tau=0.7)
        step = 37
        out = dpl_objective(None, pairs, cfg, step=step, alphas=[0.6])
        lam_c = ramp_weight(step, cfg.ramp_steps, 2.0)
        lam_e = ramp_weight(step, cfg.ramp_steps, 0.5)
        want = (
            cfg.lambda_p * out.pseudolabel + lam_c * out.consistency - lam_e * out.entropy
        )
        assert out.total == pytest.approx(want, abs=1e-12)

    def test_seeded_alpha_draw_is_deterministic(self, make_grid, rng):
        pairs = [pair_of(make_grid, rng.random((4, 4)), rng.random((4, 4)))]
        cfg = DplConfig(rng_seed=42, confidence_tau=0.7)
        a = dpl_objective(None, pairs, cfg, step=3)
        b = dpl_objective(None, pairs, cfg, step=3)
        assert a == b

    def test_as_dict_roundtrip_keys(self, make_grid, rng):
        pairs = [pair_of(make_grid, rng.random((3, 3)), rng.random((3, 3)))]
        out = dpl_objective(None, pairs, DplConfig(), step=0, alphas=[0.5])
        d = out.as_dict()
        assert set(d) == {"supervised", "pseudolabel", "consistency", "entropy", "total"}
        assert d["total"] == out.total

    def test_input_validation(self, make_grid, rng):
        with pytest.raises(DataError):
            dpl_objective(None, [], DplConfig(), step=0)
        pairs = [pair_of(make_grid, rng.random((3, 3)), rng.random((3, 3)))]
        with pytest.raises(DataError):
            dpl_objective(None, pairs, DplConfig(), step=0, alphas=[0.5, 0.5])
