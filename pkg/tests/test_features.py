from datetime import datetime, timezone

import numpy as np
import pytest

from somnus.errors import InsufficientData, NoOverlap
from somnus.features import (
    DAY_SECONDS,
    DaySeries,
    FEATURE_NAMES,
    LabeledDataset,
    N_FEATURES,
    build_dataset,
    correlation_matrix,
    featurize,
    label_series,
    read_features,
    select_features,
    window_anchor,
    write_features,
)
from somnus.records import DeviceRegistry, FilterPolicy, RegistryEntry, filter_records
from somnus.synth import GroundTruthDay, truth_index
from tests.test_records import make_record

UTC = timezone.utc


def registry_one_phone(user="u1"):
    # the default MAC used by make_record
    return DeviceRegistry(
        {"aa:bb:cc:dd:ee:01": RegistryEntry(user, "smartphone_personal")}
    )


def at(hour, minute=0, second=0, day=2):
    return datetime(2021, 3, day, hour, minute, second, tzinfo=UTC)


class TestBucketing:
    def test_counts_and_unique_aps(self):
        # 3 records for one smartphone in minute 412 with 2 distinct bssids
        # (window starts 18:00; minute 412 is 00:52 next day)
        base = at(0, 52, day=2)
        records = [
            make_record(timestamp=base, bssid="10:00:00:00:00:01"),
            make_record(timestamp=base.replace(second=10), bssid="10:00:00:00:00:01"),
            make_record(timestamp=base.replace(second=30), bssid="10:00:00:00:00:02"),
        ]
        res = featurize(records, registry_one_phone())
        assert len(res.series) == 1
        s = res.series[0]
        assert s.day == "2021-03-01"
        row = dict(zip(FEATURE_NAMES, s.X[412]))
        assert row["net_events_smartphone_personal"] == 3
        assert row["unique_aps_smartphone_personal"] == 2
        assert row["all_net_events"] == 3
        assert row["all_unique_aps"] == 2

    def test_empty_slots_zero_filled(self):
        records = [make_record(timestamp=at(19, 30, day=1))]
        res = featurize(records, registry_one_phone())
        s = res.series[0]
        assert s.slots == 1440
        assert np.all(s.X[7] == 0)
        assert s.X.sum() == 2  # one event + one unique AP

    def test_unknown_mac_counted_and_skipped(self):
        records = [
            make_record(timestamp=at(19, 0, day=1)),
            make_record(timestamp=at(19, 1, day=1), device_mac="ff:ff:ff:ff:ff:01"),
        ]
        res = featurize(records, registry_one_phone())
        assert res.unknown_mac_records == 1
        assert res.unknown_macs == {"ff:ff:ff:ff:ff:01"}
        assert res.series[0].X[:, 8].sum() == 1

    def test_shared_device_only_in_aggregates(self):
        reg = DeviceRegistry(
            {
                "aa:00:00:00:00:01": RegistryEntry("u1", "smartphone_personal"),
                "aa:00:00:00:00:02": RegistryEntry("u1", "shared"),
            }
        )
        records = [
            make_record(timestamp=at(19, 0, day=1)),
            make_record(timestamp=at(19, 0, day=1), device_mac="aa:00:00:00:00:02"),
        ]
        s = featurize(records, reg).series[0]
        slot = s.X[60]
        assert slot[0] == 1  # phone events
        assert slot[8] == 2  # all events include the shared device
        assert slot[:4].sum() == 1

    def test_conservation_against_generator(self, tiny_cohort):
        _, registry, truths, records = tiny_cohort
        kept = list(filter_records(records, FilterPolicy()))
        res = featurize(kept, registry)
        total = sum(int(s.X[:, 8].sum()) for s in res.series)
        assert total == len(kept)

    def test_rebucketing_sums_match(self, tiny_cohort):
        # event counts at 60s summed over 4-slot groups equal the 240s counts
        _, registry, truths, records = tiny_cohort
        kept = list(filter_records(records, FilterPolicy()))
        fine = featurize(kept, registry, interval=60)
        coarse = featurize(kept, registry, interval=240)
        fine_map = {(s.user_id, s.day): s for s in fine.series}
        for s in coarse.series:
            f = fine_map[(s.user_id, s.day)]
            events_cols = [0, 1, 2, 3, 8]
            grouped = f.X[:, events_cols].reshape(-1, 4, len(events_cols)).sum(axis=1)
            assert np.array_equal(grouped, s.X[:, events_cols])
            # unique-AP counts are subadditive under coarsening
            aps_cols = [4, 5, 6, 7, 9]
            grouped_aps = f.X[:, aps_cols].reshape(-1, 4, len(aps_cols)).sum(axis=1)
            assert np.all(s.X[:, aps_cols] <= grouped_aps)

    def test_interval_must_divide_day(self):
        with pytest.raises(InsufficientData):
            featurize([], registry_one_phone(), interval=7)

    def test_timezone_window_assignment(self):
        # 22:00 UTC on Mar 1 is 17:00 in New York (UTC-5): before the 18:00
        # anchor, so the record belongs to the Feb 28 window
        rec = make_record(timestamp=at(22, 0, day=1))
        res = featurize([rec], registry_one_phone(), tz="America/New_York")
        assert res.series[0].day == "2021-02-28"
        rec2 = make_record(timestamp=at(23, 30, day=1))  # 18:30 local
        res2 = featurize([rec2], registry_one_phone(), tz="America/New_York")
        assert res2.series[0].day == "2021-03-01"
        assert res2.series[0].X[30, 0] == 1

    def test_window_anchor_consistent(self):
        from zoneinfo import ZoneInfo

        day, start = window_anchor(at(17, 59, day=2), ZoneInfo("UTC"))
        assert day == "2021-03-01"
        day2, start2 = window_anchor(at(18, 0, day=2), ZoneInfo("UTC"))
        assert day2 == "2021-03-02"
        assert (at(18, 0, day=2) - start2).total_seconds() == 0


def series_with_window(day="2021-03-01"):
    return DaySeries(
        user_id="u1",
        day=day,
        window_start=at(18, 0, day=1),
        interval=60,
        X=np.zeros((1440, N_FEATURES), np.int32),
    )


class TestLabels:
    def test_interval_to_slots(self):
        s = series_with_window()
        truth = GroundTruthDay("u1", "2021-03-01", at(1, 0, day=2), at(8, 0, day=2))
        labels = label_series(s, truth)
        assert labels.sum() == 420
        assert labels[420] == 1 and labels[419] == 0
        assert labels[839] == 1 and labels[840] == 0

    def test_full_window_all_ones(self):
        s = series_with_window()
        truth = GroundTruthDay("u1", "2021-03-01", at(18, 0, day=1), at(18, 0, day=2))
        assert label_series(s, truth).sum() == 1440

    def test_no_overlap(self):
        s = series_with_window()
        truth = GroundTruthDay("u1", "x", at(19, 0, day=5), at(20, 0, day=5))
        with pytest.raises(NoOverlap):
            label_series(s, truth)

    def test_label_conservation_on_cohort(self, tiny_cohort):
        _, registry, truths, records = tiny_cohort
        kept = list(filter_records(records, FilterPolicy()))
        res = featurize(kept, registry)
        idx = truth_index(truths)
        for s in res.series:
            t = idx[(s.user_id, s.day)]
            labels = label_series(s, t)
            minutes = (t.sleep_end - t.sleep_start).total_seconds() / 60
            assert labels.sum() == minutes

    def test_build_dataset_reports_unmatched(self, tiny_cohort):
        _, registry, truths, records = tiny_cohort
        kept = list(filter_records(records, FilterPolicy()))
        res = featurize(kept, registry)
        ds, unmatched = build_dataset(res.series, {})
        assert len(ds) == 0
        assert len(unmatched) == len(res.series)


class TestCorrelation:
    def test_duplicated_feature_perfectly_correlated(self, rng):
        x = rng.normal(size=500)
        X = np.column_stack([x, x, rng.normal(size=500)])
        corr, constant = correlation_matrix(X)
        assert corr[0, 1] == pytest.approx(1.0, abs=1e-12)
        assert not constant.any()

    def test_independent_noise_near_zero(self, rng):
        X = rng.normal(size=(10_000, 4))
        corr, _ = correlation_matrix(X)
        off = corr[~np.eye(4, dtype=bool)]
        assert np.max(np.abs(off)) < 0.05

    def test_symmetric_unit_diagonal(self, rng):
        X = rng.normal(size=(200, 6))
        corr, _ = correlation_matrix(X)
        assert np.array_equal(corr, corr.T)
        assert np.all(np.diag(corr) == 1.0)

    def test_constant_feature_flagged_zeroed(self, rng):
        X = np.column_stack([np.full(100, 3.0), rng.normal(size=100)])
        corr, constant = correlation_matrix(X)
        assert constant[0] and not constant[1]
        assert corr[0, 1] == 0.0
        assert corr[0, 0] == 1.0

    def test_insufficient_data(self):
        with pytest.raises(InsufficientData):
            correlation_matrix(np.zeros((1, 3)))


class TestSelectFeatures:
    def test_drops_unique_aps_member(self):
        corr = np.eye(N_FEATURES)
        # events_laptop (2) strongly correlated with unique_aps_laptop (6)
        corr[2, 6] = corr[6, 2] = 0.95
        kept = select_features(corr, threshold=0.9)
        assert 2 in kept
        assert 6 not in kept

    def test_no_high_correlation_identity(self):
        corr = np.eye(N_FEATURES)
        assert select_features(corr, threshold=0.9) == list(range(N_FEATURES))

    def test_unreachable_threshold(self):
        corr = np.ones((N_FEATURES, N_FEATURES))
        assert select_features(corr, threshold=1.01) == list(range(N_FEATURES))

    def test_same_kind_pair_drops_higher_index(self):
        corr = np.eye(4)
        corr[0, 1] = corr[1, 0] = 0.99
        kept = select_features(corr, threshold=0.9, feature_names=("a", "b", "c", "d"))
        assert kept == [0, 2, 3]

    def test_real_cohort_drops_ap_twins(self, tiny_dataset):
        # the unique-AP columns track their event-count twins (r ~ 0.7-0.8
        # here; AP pools saturate the unique counts), so selection at a
        # matching threshold removes AP columns and never event columns
        ds, _, _ = tiny_dataset
        corr, _ = correlation_matrix(ds.X)
        kept = select_features(corr, threshold=0.7)
        dropped = sorted(set(range(N_FEATURES)) - set(kept))
        assert any(FEATURE_NAMES[i].startswith("unique_aps") or
                   FEATURE_NAMES[i] == "all_unique_aps" for i in dropped)
        for i in dropped:
            name = FEATURE_NAMES[i]
            assert name.startswith("unique_aps") or name == "all_unique_aps"


class TestPurity:
    def test_featurize_is_reproducible(self, tiny_cohort):
        _, registry, truths, records = tiny_cohort
        kept = list(filter_records(records, FilterPolicy()))
        a = featurize(kept, registry)
        b = featurize(kept, registry)
        for s1, s2 in zip(a.series, b.series):
            assert s1.user_id == s2.user_id and s1.day == s2.day
            assert np.array_equal(s1.X, s2.X)


class TestFeaturesCsv:
    def test_round_trip(self, tmp_path, tiny_cohort):
        _, registry, truths, records = tiny_cohort
        kept = list(filter_records(records, FilterPolicy()))
        res = featurize(kept, registry)
        idx = truth_index(truths)
        labels = {
            (s.user_id, s.day): label_series(s, idx[(s.user_id, s.day)])
            for s in res.series
        }
        path = tmp_path / "features.csv"
        write_features(path, res.series, labels, header_comment="seed=1")
        series2, labels2 = read_features(path)
        assert len(series2) == len(res.series)
        fine = {(s.user_id, s.day): s for s in res.series}
        for s in series2:
            orig = fine[(s.user_id, s.day)]
            assert np.array_equal(s.X, orig.X)
            assert s.window_start == orig.window_start
            assert np.array_equal(labels2[(s.user_id, s.day)],
                                  labels[(s.user_id, s.day)])
