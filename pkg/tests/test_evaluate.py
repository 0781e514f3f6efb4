import statistics
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somnus.errors import LengthMismatch, TooFewUsers, UnmatchedDay
from somnus.estimate import ConfidenceConfig, SleepEstimate
from somnus.evaluate import (
    classification_metrics,
    duration_distribution_test,
    error_stats,
    estimates_from_folds,
    paired_pvalue,
    retention_curve,
    run_louo,
    timing_errors,
)
from somnus.features import LabeledDataset
from somnus.forest import ForestParams
from somnus.synth import GroundTruthDay

UTC = timezone.utc


class TestClassificationMetrics:
    def test_definitions(self):
        preds = np.concatenate([np.ones(100), np.zeros(900)])
        labels = np.concatenate([np.ones(90), np.zeros(10), np.ones(10), np.zeros(890)])
        m = classification_metrics(preds, labels)
        assert (m.tp, m.fn, m.fp, m.tn) == (90, 10, 10, 890)
        assert m.recall == pytest.approx(0.9)
        assert m.precision == pytest.approx(0.9)
        assert m.accuracy == pytest.approx(0.98)
        assert m.f1 == pytest.approx(0.9)

    def test_perfect(self):
        y = np.array([0, 1, 1, 0, 1])
        m = classification_metrics(y, y)
        assert m.accuracy == m.precision == m.recall == m.f1 == 1.0
        assert m.f1_weighted == 1.0

    def test_degenerate_all_awake(self):
        preds = np.zeros(10)
        labels = np.array([0, 1] * 5)
        m = classification_metrics(preds, labels)
        assert m.recall == 0.0
        assert m.precision == 0.0
        assert "precision_undefined" in m.flags

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            classification_metrics(np.zeros(3), np.zeros(4))

    def test_counts_sum_to_sample_size(self, rng):
        preds = (rng.random(500) < 0.4).astype(int)
        labels = (rng.random(500) < 0.3).astype(int)
        m = classification_metrics(preds, labels)
        assert m.tp + m.fp + m.tn + m.fn == 500

    def test_metrics_recomputable_from_counts(self, rng):
        preds = (rng.random(500) < 0.4).astype(int)
        labels = (rng.random(500) < 0.3).astype(int)
        m = classification_metrics(preds, labels)
        assert m.accuracy == pytest.approx((m.tp + m.tn) / 500)
        assert m.precision == pytest.approx(m.tp / (m.tp + m.fp))
        assert m.recall == pytest.approx(m.tp / (m.tp + m.fn))
        assert m.f1 == pytest.approx(
            2 * m.precision * m.recall / (m.precision + m.recall)
        )


class TestErrorStats:
    def test_against_statistics_module(self):
        errors = np.array([20.0, 0.0, 5.0, 5.0, 12.0, 33.0, 7.0, 5.0, 18.0, 2.0])
        s = error_stats(errors)
        assert s.median == pytest.approx(statistics.median(errors))
        assert s.mean == pytest.approx(statistics.mean(errors))
        assert s.max == 33.0
        assert s.min == 0.0
        assert s.mode == statistics.mode([round(e) for e in errors])
        assert s.stddev == pytest.approx(statistics.stdev(errors))
        assert s.q1 <= s.median <= s.q3
        assert s.uif == pytest.approx(s.q3 + 1.5 * (s.q3 - s.q1))
        assert s.uof == pytest.approx(s.q3 + 3.0 * (s.q3 - s.q1))
        assert s.n == 10

    def test_ordering_invariant(self, rng):
        errors = rng.exponential(30, 200)
        s = error_stats(errors)
        assert s.min <= s.q1 <= s.median <= s.q3 <= s.max


def _instant(start_hm, base_day=2):
    h, m = start_hm
    return datetime(2021, 3, base_day, tzinfo=UTC) + timedelta(hours=h, minutes=m)


def make_truth(user, day, start_hm=(1, 30), minutes=400, base_day=2):
    start = _instant(start_hm, base_day)
    return GroundTruthDay(user, day, start, start + timedelta(minutes=minutes))


def make_estimate(user, day, start_hm=(1, 10), minutes=400, rate=0.0, base_day=2):
    t_sleep = _instant(start_hm, base_day)
    return SleepEstimate(
        user_id=user,
        day=day,
        t_sleep=t_sleep,
        t_wake=t_sleep + timedelta(minutes=minutes),
        duration_min=minutes,
        uncertainty_rate=rate,
        accepted=rate <= 0.05,
        threshold_used=0.05,
        method="mva",
    )


class TestTimingErrors:
    def test_twenty_minute_error(self):
        truth = make_truth("u1", "2021-03-01", (1, 30))
        est = make_estimate("u1", "2021-03-01", (1, 10))
        stats = timing_errors([est], [truth])
        assert stats.t_sleep.mean == pytest.approx(20.0)
        assert stats.t_wake.mean == pytest.approx(20.0)
        assert stats.duration.mean == pytest.approx(0.0)

    def test_exact_match_zero(self):
        truth = make_truth("u1", "d", (2, 0), 350)
        est = make_estimate("u1", "d", (2, 0), 350)
        stats = timing_errors([est], [truth])
        assert stats.t_sleep.max == 0.0
        assert stats.t_wake.max == 0.0

    def test_unmatched_day(self):
        with pytest.raises(UnmatchedDay):
            timing_errors([make_estimate("u1", "dX")], [make_truth("u1", "dY")])

    def test_fixture_against_recomputation(self):
        truths, ests = [], []
        offsets = [0, 5, 12, 3, 30, 7, 1, 18, 9, 2]
        for i, off in enumerate(offsets):
            day = f"2021-03-{i+1:02d}"
            truths.append(make_truth("u1", day, (1, 30)))
            ests.append(make_estimate("u1", day, (1, 30 + off)))
        stats = timing_errors(ests, truths)
        assert stats.t_sleep.median == statistics.median(offsets)
        assert stats.t_sleep.mean == pytest.approx(statistics.mean(offsets))
        assert stats.t_sleep.max == max(offsets)


class TestRetention:
    def test_threshold_one_retains_all(self):
        ests = [make_estimate("u", f"d{i}", rate=r)
                for i, r in enumerate([0.0, 0.3, 0.9])]
        curve = retention_curve(ests, [1.0])
        assert curve[0].retained_fraction == 1.0

    def test_threshold_zero_retains_clean_only(self):
        ests = [make_estimate("u", f"d{i}", rate=r)
                for i, r in enumerate([0.0, 0.0, 0.5])]
        curve = retention_curve(ests, [0.0])
        assert curve[0].retained_fraction == pytest.approx(2 / 3)
        assert curve[0].n_retained == 2

    def test_unsorted_thresholds_rejected(self):
        with pytest.raises(ValueError):
            retention_curve([], [0.5, 0.1])

    @given(st.lists(st.floats(min_value=0, max_value=1), min_size=1, max_size=60))
    @settings(max_examples=200)
    def test_monotone_in_threshold(self, rates):
        ests = [make_estimate("u", f"d{i}", rate=r) for i, r in enumerate(rates)]
        thresholds = [0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0]
        curve = retention_curve(ests, thresholds)
        fracs = [pt.retained_fraction for pt in curve]
        assert fracs == sorted(fracs)

    def test_mean_errors_computed_on_retained(self):
        truths = [make_truth("u", "d0"), make_truth("u", "d1")]
        ests = [
            make_estimate("u", "d0", (1, 30), rate=0.0),  # 0 error
            make_estimate("u", "d1", (2, 30), rate=0.5),  # 60 min error
        ]
        curve = retention_curve(ests, [0.0, 1.0], truths)
        assert curve[0].mean_t_sleep_error == pytest.approx(0.0)
        assert curve[1].mean_t_sleep_error == pytest.approx(30.0)


class TestRunLouo:
    def test_too_few_users(self):
        ds = LabeledDataset.from_arrays(np.zeros((10, 2)), np.zeros(10))
        with pytest.raises(TooFewUsers):
            run_louo(ds, ForestParams(features_per_split=2), repeats=1)

    def test_separable_two_user_cohort_high_recall(self, rng):
        # two users with identical, cleanly separable behavior
        parts = []
        for user in ("a", "b"):
            for d in range(4):
                X = np.zeros((200, 2))
                y = np.zeros(200, np.uint8)
                y[:80] = 1  # sleep block: zero activity
                X[80:, 0] = rng.integers(3, 9, 120)
                X[80:, 1] = rng.integers(1, 3, 120)
                parts.append(
                    LabeledDataset.from_arrays(X, y, user_id=user, day=f"d{d}")
                )
        ds = LabeledDataset.concat(parts)
        res = run_louo(ds, ForestParams(n_trees=10, features_per_split=2, seed=1),
                       personalize_fraction=0.4, repeats=1, seed=2,
                       compute_variance=False)
        for m in res.per_user.values():
            assert m.recall > 0.99

    def test_first_repeat_stable_across_repeat_counts(self, tiny_dataset):
        ds, meta, _ = tiny_dataset
        params = ForestParams(n_trees=6, seed=3)
        one = run_louo(ds, params, 0.4, repeats=1, seed=9, window_meta=meta,
                       compute_variance=False)
        two = run_louo(ds, params, 0.4, repeats=2, seed=9, window_meta=meta,
                       compute_variance=False)
        first = {f.user_id: f for f in two.folds if f.repeat == 0}
        for fold in one.folds:
            other = first[fold.user_id]
            assert fold.test_days == other.test_days
            assert fold.metrics.accuracy == other.metrics.accuracy

    def test_no_train_test_leakage(self, tiny_dataset):
        ds, meta, _ = tiny_dataset
        res = run_louo(ds, ForestParams(n_trees=4, seed=1), 0.4, repeats=2,
                       seed=7, window_meta=meta, compute_variance=False)
        for row in res.manifest:
            train = set(row["train_days"].split(";")) if row["train_days"] else set()
            test = set(row["test_days"].split(";"))
            assert not train & test

    def test_estimates_cover_held_out_days(self, standard_louo):
        louo, truths = standard_louo
        ests = estimates_from_folds(louo.folds, ConfidenceConfig(seed=1))
        fold_days = {(f.user_id, d) for f in louo.folds for d in f.test_days}
        est_days = {(e.user_id, e.day) for e in ests}
        assert est_days <= fold_days


class TestPairedPvalue:
    def test_identical_is_one(self):
        assert paired_pvalue([0.5, 0.6, 0.7], [0.5, 0.6, 0.7]) == 1.0

    def test_shifted_is_small(self):
        a = [0.9, 0.91, 0.89, 0.92, 0.9, 0.88, 0.93, 0.9]
        b = [x - 0.05 for x in a]
        assert paired_pvalue(a, b) < 0.05


class TestDurationDistribution:
    def test_identical_distributions_high_p(self):
        truths = [make_truth("u", f"d{i}", minutes=380 + i) for i in range(30)]
        ests = [make_estimate("u", f"d{i}", (1, 30), minutes=380 + i) for i in range(30)]
        p, est_mean, true_mean = duration_distribution_test(ests, truths)
        assert p > 0.99
        assert est_mean == pytest.approx(true_mean)

    def test_shifted_distributions_low_p(self):
        truths = [make_truth("u", f"d{i}", minutes=380) for i in range(40)]
        ests = [make_estimate("u", f"d{i}", (1, 30), minutes=250) for i in range(40)]
        p, _, _ = duration_distribution_test(ests, truths)
        assert p < 0.01
