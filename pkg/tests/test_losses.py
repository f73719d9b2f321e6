import numpy as np
import pytest

from cardioprior import (
    FOREGROUND_CLASSES,
    N_CLASSES,
    LossConfig,
    NoUsableStats,
    NotOneHot,
    ProbVolume,
    ShapeMismatch,
    UnknownLoss,
    aggregate,
    case_descriptor,
    default_weights,
    gdice_ce,
    gradcheck,
    moment_loss,
    one_hot,
    relation_loss,
    softmax,
    total_loss,
    volume_loss,
)
from conftest import label_volume


def stats_for(p):
    return aggregate([case_descriptor(p)])


def hand_stats(**overrides):
    """Blank ShapeStats scaffold; tests override just the fields they score."""
    from cardioprior import ShapeStats

    base = dict(
        volume_mean=np.full(N_CLASSES, np.nan),
        volume_std=np.full(N_CLASSES, np.nan),
        centroid_mean=np.full((N_CLASSES, 3), np.nan),
        second_moment_mean=np.full((N_CLASSES, 3, 3), np.nan),
        class_n=np.zeros(N_CLASSES, dtype=np.int64),
        pair_stats={},
        triple_stats={},
        n_cases=2,
    )
    base.update(overrides)
    return ShapeStats(**base)


def two_class_labels():
    lab = np.zeros((8, 8, 8), dtype=np.uint8)
    lab[1:3, 1:3, 1:3] = 1
    lab[5:7, 5:7, 5:7] = 2
    return label_volume(lab)


def full_labels(rng):
    lab = rng.integers(0, N_CLASSES, size=(6, 6, 6)).astype(np.uint8)
    return label_volume(lab, (1.2, 0.9, 1.5))


def soft_prediction(rng, g):
    noise = 0.6 * rng.standard_normal(g.data.shape)
    return ProbVolume(softmax(4.0 * g.data + noise), g.spacing, g.offset)


class TestLossConfig:
    def test_defaults_all_one(self):
        w = default_weights()
        assert set(w) == {
            "gdice", "ce", "volume", "moment_centroid", "moment_second",
            "relation_dist", "relation_angle",
        }
        assert all(v == 1.0 for v in w.values())

    def test_partial_override_merges(self):
        cfg = LossConfig(weights={"volume": 0.5})
        assert cfg.weights["volume"] == 0.5
        assert cfg.weights["gdice"] == 1.0

    def test_rejects_unknown_key(self):
        with pytest.raises(ValueError):
            LossConfig(weights={"boundary": 1.0})

    def test_rejects_negative_weight(self):
        with pytest.raises(ValueError):
            LossConfig(weights={"ce": -0.1})

    def test_rejects_all_zero(self):
        with pytest.raises(ValueError):
            LossConfig(weights={k: 0.0 for k in default_weights()})


class TestGdiceCe:
    def test_perfect_prediction(self, rng):
        g = one_hot(full_labels(rng))
        ev = gdice_ce(g, g)
        assert ev.terms["ce"] == pytest.approx(0.0, abs=1e-9)
        assert 0.0 <= ev.terms["gdice"] < 1e-5
        assert ev.value == ev.terms["gdice"] + ev.terms["ce"]

    def test_uniform_prediction_ce_is_log8(self, rng):
        g = one_hot(full_labels(rng))
        p = ProbVolume(np.full(g.data.shape, 0.125), g.spacing, g.offset)
        ev = gdice_ce(p, g)
        assert ev.terms["ce"] == pytest.approx(np.log(8.0), abs=1e-12)

    def test_value_nonnegative_and_grad_finite(self, rng):
        g = one_hot(full_labels(rng))
        p = soft_prediction(rng, g)
        ev = gdice_ce(p, g)
        assert ev.value >= 0.0
        assert np.isfinite(ev.grad).all()

    def test_shape_mismatch(self, rng):
        g = one_hot(full_labels(rng))
        p = ProbVolume(np.full((8, 4, 4, 4), 0.125), (1, 1, 1))
        with pytest.raises(ShapeMismatch):
            gdice_ce(p, g)

    def test_not_one_hot(self, rng):
        g = one_hot(full_labels(rng))
        soft = ProbVolume(np.full(g.data.shape, 0.125), g.spacing, g.offset)
        with pytest.raises(NotOneHot):
            gdice_ce(soft, soft)


class TestVolumeLoss:
    def test_zero_at_reference(self, rng):
        p = one_hot(full_labels(rng))
        ev = volume_loss(p, stats_for_nonzero_sigma(p))
        assert ev.value == pytest.approx(0.0, abs=1e-18)
        assert np.abs(ev.grad).max() == 0.0

    def test_unit_z_score(self):
        lab = np.zeros((8, 8, 8), dtype=np.uint8)
        lab[0:2, 0:4, 0:4] = 1
        p = one_hot(label_volume(lab))
        sigma = 5.0
        stats = hand_stats(
            volume_mean=np.where(np.arange(8) == 1, 32.0 - sigma, np.nan),
            volume_std=np.where(np.arange(8) == 1, sigma, np.nan),
            class_n=(np.arange(8) == 1).astype(np.int64),
        )
        ev = volume_loss(p, stats)
        assert ev.value == pytest.approx(1.0, abs=1e-12)
        assert ev.terms["volume_LV"] == pytest.approx(1.0, abs=1e-12)

    def test_skipped_classes_report_zero_term(self):
        p = one_hot(two_class_labels())
        stats = stats_for(p)  # single case: stds are all 0, nothing scorable
        with pytest.raises(NoUsableStats):
            volume_loss(p, stats)

    def test_stable_term_keys(self, rng):
        p = one_hot(full_labels(rng))
        stats = stats_for_nonzero_sigma(p)
        ev = volume_loss(p, stats)
        assert set(ev.terms) == {f"volume_{name}" for name in CLASS_NAMES_FG}


class TestMomentLoss:
    def test_zero_on_own_statistics(self, rng):
        p = one_hot(full_labels(rng))
        ev = moment_loss(p, stats_for(p))
        assert ev.value == pytest.approx(0.0, abs=1e-9)

    def test_translation_shifts_centroid_term_quadratically(self, rng):
        lab = full_labels(rng)
        p = one_hot(lab)
        stats = stats_for(p)
        delta = 0.35
        shifted = ProbVolume(
            p.data, p.spacing, (p.offset[0] + delta, p.offset[1], p.offset[2])
        )
        base = moment_loss(p, stats)
        moved = moment_loss(shifted, stats)
        for c in FOREGROUND_CLASSES:
            name = CLASS_NAMES_FG[c - 1]
            d_cent = moved.terms[f"moment_centroid_{name}"] - base.terms[f"moment_centroid_{name}"]
            assert d_cent == pytest.approx(delta**2, abs=1e-9)
            assert moved.terms[f"moment_second_{name}"] == pytest.approx(
                base.terms[f"moment_second_{name}"], abs=1e-9
            )

    def test_no_usable_stats(self):
        p = one_hot(two_class_labels())
        with pytest.raises(NoUsableStats):
            moment_loss(p, hand_stats())


class TestRelationLoss:
    def test_zero_when_constellation_matches(self):
        p = one_hot(two_class_labels())
        desc = case_descriptor(p)
        stats = hand_stats(
            class_n=np.isin(np.arange(8), (1, 2)).astype(np.int64),
            pair_stats={(1, 2): (desc.pair_distance[(1, 2)], 1.0, 2)},
        )
        ev = relation_loss(p, stats)
        assert ev.value == pytest.approx(0.0, abs=1e-18)
        assert ev.terms["relation_dist"] == 0.0
        assert ev.terms["relation_angle"] == 0.0

    def test_unit_distance_z_score(self):
        p = one_hot(two_class_labels())
        desc = case_descriptor(p)
        s = 0.8
        stats = hand_stats(
            class_n=np.isin(np.arange(8), (1, 2)).astype(np.int64),
            pair_stats={(1, 2): (desc.pair_distance[(1, 2)] - s, s, 2)},
        )
        ev = relation_loss(p, stats)
        assert ev.terms["relation_dist"] == pytest.approx(1.0, abs=1e-9)

    def test_translation_invariance(self):
        p = one_hot(two_class_labels())
        desc = case_descriptor(p)
        stats = hand_stats(
            class_n=np.isin(np.arange(8), (1, 2)).astype(np.int64),
            pair_stats={(1, 2): (desc.pair_distance[(1, 2)] - 0.5, 0.5, 2)},
        )
        moved = ProbVolume(p.data, p.spacing, (7.0, -11.0, 3.5))
        assert relation_loss(moved, stats).value == pytest.approx(
            relation_loss(p, stats).value, abs=1e-9
        )

    def test_needs_two_usable_classes(self):
        p = one_hot(two_class_labels())
        stats = hand_stats(class_n=(np.arange(8) == 1).astype(np.int64))
        with pytest.raises(NoUsableStats):
            relation_loss(p, stats)


class TestTotalLoss:
    def test_reduces_to_gdice_ce(self, rng):
        g = one_hot(full_labels(rng))
        logits = rng.standard_normal(g.data.shape)
        zeros = {k: 0.0 for k in ("volume", "moment_centroid", "moment_second",
                                  "relation_dist", "relation_angle")}
        ev = total_loss(logits, g, LossConfig(weights=zeros))
        p = ProbVolume(softmax(logits), g.spacing, g.offset)
        ref = gdice_ce(p, g)
        assert ev.value == ref.value
        assert ev.terms == ref.terms

    def test_shift_invariance_and_grad_sum(self, rng):
        g = one_hot(full_labels(rng))
        logits = rng.standard_normal(g.data.shape)
        ev = total_loss(logits, g, LossConfig(weights={"gdice": 1.0, "ce": 1.0,
                                                       **dict.fromkeys(
                                                           ("volume", "moment_centroid",
                                                            "moment_second", "relation_dist",
                                                            "relation_angle"), 0.0)}))
        shifted = logits.copy()
        shifted[:, 2, 3, 1] += 4.2
        ev2 = total_loss(shifted, g, LossConfig(weights={"gdice": 1.0, "ce": 1.0,
                                                         **dict.fromkeys(
                                                             ("volume", "moment_centroid",
                                                              "moment_second", "relation_dist",
                                                              "relation_angle"), 0.0)}))
        assert ev2.value == pytest.approx(ev.value, abs=1e-12)
        assert abs(ev.grad[:, 2, 3, 1].sum()) < 1e-12

    def test_full_config_terms_sum_to_value(self, rng):
        g = one_hot(full_labels(rng))
        logits = 2.0 * rng.standard_normal(g.data.shape)
        stats = stats_for_nonzero_sigma(one_hot(full_labels(np.random.default_rng(7))))
        ev = total_loss(logits, g, LossConfig(stats=stats))
        assert ev.value == pytest.approx(sum(ev.terms.values()), abs=1e-9)
        assert np.isfinite(ev.grad).all()

    def test_requires_stats_for_regularizers(self, rng):
        g = one_hot(full_labels(rng))
        with pytest.raises(NoUsableStats):
            total_loss(np.zeros(g.data.shape), g, LossConfig())

    def test_shape_mismatch(self, rng):
        g = one_hot(full_labels(rng))
        with pytest.raises(ShapeMismatch):
            total_loss(np.zeros((8, 4, 4, 4)), g, LossConfig())


class TestGradcheck:
    def test_volume_gradcheck_seed0(self):
        report = gradcheck("volume", size=8, seed=0)
        assert report["max_rel_err"] < 1e-6
        assert report["n_entries"] == 8 * 8 * 8 * 8

    def test_unknown_loss(self):
        with pytest.raises(UnknownLoss):
            gradcheck("boundary", size=8, seed=0)


# per-class term names used across the tests above
CLASS_NAMES_FG = ("LV", "RV", "LA", "RA", "myocardium", "ascending_aorta", "pulmonary_artery")


def stats_for_nonzero_sigma(p):
    """Own-case means with a healthy synthetic sigma so nothing is skipped."""
    stats = stats_for(p)
    sigma = np.where(np.isfinite(stats.volume_mean), 7.5, np.nan)
    return hand_stats(
        volume_mean=stats.volume_mean,
        volume_std=sigma,
        centroid_mean=stats.centroid_mean,
        second_moment_mean=stats.second_moment_mean,
        class_n=stats.class_n,
        pair_stats={k: (v[0], 1.0, 2) for k, v in stats.pair_stats.items()},
        triple_stats={k: (v[0], 1.0, 2) for k, v in stats.triple_stats.items()},
    )
