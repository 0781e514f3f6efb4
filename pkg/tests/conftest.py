import numpy as np
import pytest

from somnus.evaluate import Cohort, day_window_meta, run_louo
from somnus.features import build_dataset, featurize
from somnus.forest import ForestParams
from somnus.records import FilterPolicy, filter_records
from somnus.synth import gen_cohort, preset_cohort, truth_index

TEST_SEED = 20210301


@pytest.fixture(scope="session")
def tiny_cohort():
    spec = preset_cohort("tiny")
    registry, truths, rec_iter = gen_cohort(spec, TEST_SEED)
    return spec, registry, truths, list(rec_iter)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cohort):
    _, registry, truths, records = tiny_cohort
    kept = list(filter_records(records, FilterPolicy()))
    res = featurize(kept, registry)
    ds, _ = build_dataset(res.series, truth_index(truths))
    return ds, day_window_meta(res.series), truths


@pytest.fixture(scope="session")
def standard_cohort():
    spec = preset_cohort("standard")
    registry, truths, rec_iter = gen_cohort(spec, TEST_SEED)
    return Cohort(records=list(rec_iter), registry=registry, truths=truths)


@pytest.fixture(scope="session")
def standard_louo(standard_cohort):
    kept = list(filter_records(standard_cohort.records, standard_cohort.policy))
    res = featurize(kept, standard_cohort.registry)
    ds, _ = build_dataset(res.series, truth_index(standard_cohort.truths))
    meta = day_window_meta(res.series)
    louo = run_louo(
        ds,
        ForestParams(n_trees=40, seed=9),
        personalize_fraction=0.4,
        repeats=1,
        seed=5,
        window_meta=meta,
    )
    return louo, standard_cohort.truths


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
