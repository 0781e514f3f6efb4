"""Leave-one-user-out evaluation harness and report generation.

For every user the model trains on everyone else plus a whole-day sample of
the target user's labeled days, then predicts the held-out days. Metrics,
timing-error statistics, retention/uncertainty trade-off curves, device
ablations, and sampling-interval sweeps all run off the same fold machinery
and emit plot-ready CSV reports plus split manifests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Sequence

import numpy as np
from scipy import stats as scipy_stats

from .errors import LengthMismatch, TooFewUsers, UnmatchedDay
from .estimate import (
    ConfidenceConfig,
    DayPredictions,
    SleepEstimate,
    confidence_band,
    confidence_flags,
    estimate_sleep,
)
from .features import FEATURE_CLASSES, LabeledDataset, build_dataset, featurize
from .forest import (
    ForestParams,
    ij_variance_batch,
    predict_proba,
    train_forest,
    train_semi_personalized,
)
from .records import DeviceRegistry, FilterPolicy, RtlsRecord, filter_records
from .synth import GroundTruthDay, truth_index

DECISION_THRESHOLD = 0.5


@dataclass
class ClassMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    f1_weighted: float
    tp: int
    fp: int
    tn: int
    fn: int
    flags: list[str] = field(default_factory=list)


def classification_metrics(preds, labels) -> ClassMetrics:
    """Binary metrics with sleep (1) as the positive class.

    Degenerate denominators (no predicted/actual positives) report 0 and
    add a flag rather than raising.
    """
    preds = np.asarray(preds).astype(np.uint8)
    labels = np.asarray(labels).astype(np.uint8)
    if preds.shape[0] != labels.shape[0]:
        raise LengthMismatch(f"{preds.shape[0]} predictions vs {labels.shape[0]} labels")
    if preds.shape[0] == 0:
        raise LengthMismatch("need at least one sample")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    n = tp + fp + tn + fn
    flags = []
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, flags = 0.0, flags + ["precision_undefined"]
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, flags = 0.0, flags + ["recall_undefined"]
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    # weighted F1 averages both per-class F1 scores by class support
    if tn + fn > 0:
        prec0 = tn / (tn + fn)
    else:
        prec0 = 0.0
    rec0 = tn / (tn + fp) if tn + fp > 0 else 0.0
    f1_0 = 2 * prec0 * rec0 / (prec0 + rec0) if prec0 + rec0 > 0 else 0.0
    n_pos = tp + fn
    n_neg = tn + fp
    f1_weighted = (n_pos * f1 + n_neg * f1_0) / n if n else 0.0
    return ClassMetrics(
        accuracy=(tp + tn) / n,
        precision=precision,
        recall=recall,
        f1=f1,
        f1_weighted=f1_weighted,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        flags=flags,
    )


def _mean_metrics(parts: Sequence[ClassMetrics]) -> ClassMetrics:
    return ClassMetrics(
        accuracy=float(np.mean([m.accuracy for m in parts])),
        precision=float(np.mean([m.precision for m in parts])),
        recall=float(np.mean([m.recall for m in parts])),
        f1=float(np.mean([m.f1 for m in parts])),
        f1_weighted=float(np.mean([m.f1_weighted for m in parts])),
        tp=int(sum(m.tp for m in parts)),
        fp=int(sum(m.fp for m in parts)),
        tn=int(sum(m.tn for m in parts)),
        fn=int(sum(m.fn for m in parts)),
        flags=sorted({f for m in parts for f in m.flags}),
    )


# ---------------------------------------------------------------------------
# Cohort container and fold machinery


@dataclass
class Cohort:
    """Everything one evaluation needs: records, registry, ground truth."""

    records: list[RtlsRecord]
    registry: DeviceRegistry
    truths: list[GroundTruthDay]
    tz: str = "UTC"
    policy: FilterPolicy = field(default_factory=FilterPolicy)

    def dataset(self, interval: int = 60, registry: DeviceRegistry | None = None) -> LabeledDataset:
        kept = filter_records(self.records, self.policy)
        res = featurize(kept, registry or self.registry, interval=interval, tz=self.tz)
        ds, _ = build_dataset(res.series, truth_index(self.truths))
        return ds


def _fold_seed(base: int, user_index: int, repeat: int) -> int:
    return int(
        np.random.SeedSequence([base, user_index, repeat]).generate_state(1, np.uint64)[0]
        >> 1
    )


@dataclass
class Fold:
    user_id: str
    repeat: int
    predictions: list[DayPredictions]
    metrics: ClassMetrics
    train_days: list[str]
    test_days: list[str]


@dataclass
class LouoResult:
    per_user: dict[str, ClassMetrics]
    folds: list[Fold]
    manifest: list[dict]

    @property
    def macro(self) -> ClassMetrics:
        return _mean_metrics(list(self.per_user.values()))


def _predict_days(forest, user_ds: LabeledDataset, days: Sequence[str],
                  meta: dict, compute_variance: bool = True) -> list[DayPredictions]:
    out = []
    for day in days:
        mask = user_ds.days == day
        X = user_ds.X[mask]
        order = np.argsort(user_ds.slots[mask], kind="stable")
        X = X[order]
        probs = predict_proba(forest, X)
        if compute_variance:
            ij = ij_variance_batch(forest, X)
            var_raw, var_corr = ij.raw, ij.corrected
        else:
            var_raw = np.zeros_like(probs)
            var_corr = np.zeros_like(probs)
        out.append(
            DayPredictions(
                user_id=user_ds.user_ids[mask][0],
                day=day,
                window_start=meta[(user_ds.user_ids[mask][0], day)][0],
                interval=meta[(user_ds.user_ids[mask][0], day)][1],
                probs=probs,
                var_raw=var_raw,
                var_corrected=var_corr,
                states=(probs >= DECISION_THRESHOLD).astype(np.uint8),
                labels=user_ds.y[mask][order],
            )
        )
    return out


def day_window_meta(series_list) -> dict:
    """(user, day) -> (window_start, interval), needed to place estimates."""
    return {(s.user_id, s.day): (s.window_start, s.interval) for s in series_list}


def run_louo(
    dataset: LabeledDataset,
    params: ForestParams,
    personalize_fraction: float = 0.4,
    repeats: int = 5,
    seed: int = 0,
    window_meta: dict | None = None,
    jobs: int = 1,
    compute_variance: bool = True,
) -> LouoResult:
    """Leave-one-user-out semi-personalized evaluation.

    Each repeat redraws the personalization day sample; fold RNG streams are
    keyed by (seed, user index, repeat), so results never depend on
    scheduling or on how many repeats run.
    """
    users = sorted(set(dataset.user_ids.tolist()))
    if len(users) < 2:
        raise TooFewUsers(f"leave-one-user-out needs >= 2 users, got {len(users)}")
    if window_meta is None:
        window_meta = {}
        for user, day in dataset.user_day_list():
            window_meta[(user, day)] = (datetime(2000, 1, 1), 60)
    per_user: dict[str, ClassMetrics] = {}
    folds: list[Fold] = []
    manifest: list[dict] = []
    for ui, user in enumerate(users):
        general = dataset.for_user(user, invert=True)
        user_ds = dataset.for_user(user)
        rep_metrics = []
        for rep in range(repeats):
            fseed = _fold_seed(seed, ui, rep)
            fold_params = replace(params, seed=_fold_seed(params.seed, ui, rep))
            forest, held = train_semi_personalized(
                general, user_ds, personalize_fraction, fold_params,
                day_seed=fseed, jobs=jobs,
            )
            preds = _predict_days(forest, user_ds, held, window_meta,
                                  compute_variance=compute_variance)
            all_states = np.concatenate([p.states for p in preds])
            all_labels = np.concatenate([p.labels for p in preds])
            m = classification_metrics(all_states, all_labels)
            user_days = sorted(set(user_ds.days.tolist()))
            train_days = sorted(set(user_days) - set(held))
            rep_metrics.append(m)
            folds.append(Fold(user, rep, preds, m, train_days, held))
            manifest.append(
                {
                    "user_id": user,
                    "repeat": rep,
                    "fraction": personalize_fraction,
                    "train_days": ";".join(train_days),
                    "test_days": ";".join(held),
                    "day_seed": fseed,
                    "forest_seed": fold_params.seed,
                }
            )
        per_user[user] = _mean_metrics(rep_metrics)
    return LouoResult(per_user=per_user, folds=folds, manifest=manifest)


def estimates_from_folds(
    folds: Sequence[Fold],
    cfg: ConfidenceConfig,
    method: str = "mva",
    threshold: float = 0.05,
    mva_window: int = 5,
    agg_window: int = 30,
    sg_window: int = 5,
    sg_degree: int = 2,
) -> list[SleepEstimate]:
    """Flag and estimate every fold day.

    The user_band confidence band pools all of a user's predictions within
    one repeat, matching per-user sampling; flags are computed on raw
    per-minute predictions before any smoothing.
    """
    out = []
    for fold in folds:
        if not fold.predictions:
            continue
        band = None
        if cfg.mode == "user_band":
            pool = np.concatenate([p.probs for p in fold.predictions])
            band = confidence_band(pool, cfg)
        for preds in fold.predictions:
            flags = confidence_flags(
                preds.probs, cfg, variances=preds.var_corrected, band=band
            )
            try:
                est = estimate_sleep(
                    preds, flags, method=method, threshold=threshold,
                    mva_window=mva_window, agg_window=agg_window,
                    sg_window=sg_window, sg_degree=sg_degree, repeat=fold.repeat,
                )
            except Exception as e:
                from .errors import NoSleepDetected

                if isinstance(e, NoSleepDetected):
                    continue
                raise
            out.append(est)
    return out


# ---------------------------------------------------------------------------
# Timing-error statistics (absolute minutes)


@dataclass
class ErrorStats:
    median: float
    mean: float
    max: float
    min: float
    mode: float
    stddev: float
    q1: float
    q3: float
    uif: float  # upper inner fence, q3 + 1.5 iqr
    uof: float  # upper outer fence, q3 + 3 iqr
    n: int


def error_stats(errors: np.ndarray) -> ErrorStats:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        nan = float("nan")
        return ErrorStats(*([nan] * 10), n=0)
    q1 = float(np.percentile(errors, 25))
    q3 = float(np.percentile(errors, 75))
    iqr = q3 - q1
    rounded = np.round(errors).astype(int)
    counts = np.bincount(rounded)
    mode = float(np.argmax(counts))
    return ErrorStats(
        median=float(np.median(errors)),
        mean=float(np.mean(errors)),
        max=float(np.max(errors)),
        min=float(np.min(errors)),
        mode=mode,
        stddev=float(np.std(errors, ddof=1)) if errors.size > 1 else 0.0,
        q1=q1,
        q3=q3,
        uif=q3 + 1.5 * iqr,
        uof=q3 + 3.0 * iqr,
        n=int(errors.size),
    )


@dataclass
class TimingErrorStats:
    t_sleep: ErrorStats
    t_wake: ErrorStats
    duration: ErrorStats


def _matched_errors(
    estimates: Sequence[SleepEstimate], truths: Sequence[GroundTruthDay]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx = truth_index(truths)
    sleep_err, wake_err, dur_err = [], [], []
    for e in estimates:
        t = idx.get((e.user_id, e.day))
        if t is None:
            raise UnmatchedDay(f"no ground truth for ({e.user_id}, {e.day})")
        sleep_err.append(abs((e.t_sleep - t.sleep_start).total_seconds()) / 60.0)
        wake_err.append(abs((e.t_wake - t.sleep_end).total_seconds()) / 60.0)
        true_dur = (t.sleep_end - t.sleep_start).total_seconds() / 60.0
        dur_err.append(abs(e.duration_min - true_dur))
    return np.array(sleep_err), np.array(wake_err), np.array(dur_err)


def timing_errors(
    estimates: Sequence[SleepEstimate], truths: Sequence[GroundTruthDay]
) -> TimingErrorStats:
    sleep_err, wake_err, dur_err = _matched_errors(estimates, truths)
    return TimingErrorStats(
        t_sleep=error_stats(sleep_err),
        t_wake=error_stats(wake_err),
        duration=error_stats(dur_err),
    )


# ---------------------------------------------------------------------------
# Retention / uncertainty trade-off


@dataclass
class RetentionPoint:
    threshold: float
    retained_fraction: float
    mean_t_sleep_error: float
    mean_t_wake_error: float
    n_retained: int


def retention_curve(
    estimates: Sequence[SleepEstimate],
    thresholds: Sequence[float],
    truths: Sequence[GroundTruthDay] | None = None,
) -> list[RetentionPoint]:
    """Retained fraction and mean errors at each uncertainty threshold."""
    thresholds = list(thresholds)
    if sorted(thresholds) != thresholds:
        raise ValueError("thresholds must be sorted ascending")
    rates = np.array([e.uncertainty_rate for e in estimates])
    if truths is not None and len(estimates):
        sleep_err, wake_err, _ = _matched_errors(estimates, truths)
    else:
        sleep_err = wake_err = np.full(len(estimates), np.nan)
    out = []
    for thr in thresholds:
        sel = rates <= thr
        n_ret = int(sel.sum())
        out.append(
            RetentionPoint(
                threshold=thr,
                retained_fraction=float(sel.mean()) if len(estimates) else 0.0,
                mean_t_sleep_error=float(sleep_err[sel].mean()) if n_ret else float("nan"),
                mean_t_wake_error=float(wake_err[sel].mean()) if n_ret else float("nan"),
                n_retained=n_ret,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Paired significance between configurations


def paired_pvalue(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided paired test over per-user metric values."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        return float("nan")
    diffs = a - b
    if np.allclose(diffs, 0):
        return 1.0
    try:
        return float(scipy_stats.wilcoxon(a, b, zero_method="zsplit").pvalue)
    except ValueError:
        return float("nan")


# ---------------------------------------------------------------------------
# Device ablation (Table-style comparison of device subsets)

DEVICE_SUBSETS = ("smartphone", "smartphone_plus_one", "all")


def _subset_registry(registry: DeviceRegistry, subset: str) -> DeviceRegistry:
    phones = {"smartphone_personal", "smartphone_study"}
    if subset == "all":
        return registry
    keep: dict[str, set[str]] = {}
    for user in registry.users():
        if subset == "smartphone":
            keep[user] = set(phones)
        elif subset == "smartphone_plus_one":
            classes = {registry.class_of(m) for m in registry.macs_of_user(user)}
            extra = next((c for c in ("laptop", "tablet") if c in classes), None)
            keep[user] = set(phones) | ({extra} if extra else set())
        else:
            raise ValueError(f"unknown device subset {subset!r}")
    return registry.restricted(keep)


@dataclass
class AblationRow:
    subset: str
    metrics: ClassMetrics
    per_user: dict[str, ClassMetrics]
    p_vs_first: float


def ablation_devices(
    cohort: Cohort,
    device_subsets: Sequence[str] = DEVICE_SUBSETS,
    params: ForestParams = ForestParams(),
    personalize_fraction: float = 0.4,
    repeats: int = 1,
    seed: int = 0,
    interval: int = 60,
    jobs: int = 1,
) -> list[AblationRow]:
    """Re-featurize with each device subset and run the same evaluation.

    Seeds are shared across subsets, so rows differ only by the feature
    view of the cohort.
    """
    rows: list[AblationRow] = []
    base_users: list[str] = []
    base_acc: list[float] = []
    for subset in device_subsets:
        reg = _subset_registry(cohort.registry, subset)
        ds = cohort.dataset(interval=interval, registry=reg)
        res = run_louo(
            ds, params, personalize_fraction, repeats=repeats, seed=seed,
            jobs=jobs, compute_variance=False,
        )
        if not rows:
            base_users = sorted(res.per_user)
            base_acc = [res.per_user[u].accuracy for u in base_users]
            p = float("nan")
        else:
            acc = [res.per_user[u].accuracy for u in base_users if u in res.per_user]
            p = paired_pvalue(acc, base_acc)
        rows.append(AblationRow(subset=subset, metrics=res.macro,
                                per_user=res.per_user, p_vs_first=p))
    return rows


# ---------------------------------------------------------------------------
# Sampling-interval sweep

SWEEP_INTERVALS = (1800, 900, 600, 300, 60, 45, 30)


@dataclass
class SweepRow:
    interval: int
    is_default: bool
    metrics: ClassMetrics
    per_user: dict[str, ClassMetrics]


def frequency_sweep(
    cohort: Cohort,
    intervals: Sequence[int] = SWEEP_INTERVALS,
    params: ForestParams = ForestParams(),
    personalize_fraction: float = 0.4,
    repeats: int = 1,
    seed: int = 0,
    jobs: int = 1,
) -> list[SweepRow]:
    """Re-bucket features at each interval and rerun the evaluation."""
    rows = []
    for interval in intervals:
        ds = cohort.dataset(interval=interval)
        res = run_louo(
            ds, params, personalize_fraction, repeats=repeats, seed=seed,
            jobs=jobs, compute_variance=False,
        )
        rows.append(
            SweepRow(interval=int(interval), is_default=(interval == 60),
                     metrics=res.macro, per_user=res.per_user)
        )
    return rows


# ---------------------------------------------------------------------------
# Personalization-fraction comparison (paired held-out days)


@dataclass
class PersonalizationRow:
    fraction: float
    metrics: ClassMetrics
    per_user: dict[str, ClassMetrics]
    p_vs_first: float


def personalization_curve(
    dataset: LabeledDataset,
    params: ForestParams,
    fractions: Sequence[float] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    seed: int = 0,
    jobs: int = 1,
) -> list[PersonalizationRow]:
    """Accuracy as the personal-data share grows, on one fixed test split.

    Per user, days are shuffled once; fraction f trains on the first
    round(f*n) of the shuffle and every arm tests on the complement of the
    largest fraction's share, so arms are paired sample-for-sample.
    """
    users = sorted(set(dataset.user_ids.tolist()))
    if len(users) < 2:
        raise TooFewUsers("personalization comparison needs >= 2 users")
    fractions = sorted(fractions)
    max_frac = fractions[-1]
    shuffles = {}
    for ui, user in enumerate(users):
        days = sorted(set(dataset.for_user(user).days.tolist()))
        rng = np.random.default_rng(np.random.SeedSequence([seed, ui]))
        shuffles[user] = [days[i] for i in rng.permutation(len(days))]
    rows: list[PersonalizationRow] = []
    base_acc: list[float] = []
    for frac in fractions:
        per_user = {}
        for ui, user in enumerate(users):
            days = shuffles[user]
            k_max = int(round(max_frac * len(days)))
            k = int(round(frac * len(days)))
            test_days = sorted(days[k_max:])
            train_days = days[:k]
            general = dataset.for_user(user, invert=True)
            user_ds = dataset.for_user(user)
            if train_days:
                mask = np.isin(user_ds.days, train_days)
                train_ds = LabeledDataset.concat([general, user_ds.subset(mask)])
            else:
                train_ds = general
            fold_params = replace(params, seed=_fold_seed(params.seed, ui, 0))
            forest = train_forest(train_ds, fold_params, jobs=jobs)
            test_mask = np.isin(user_ds.days, test_days)
            test = user_ds.subset(test_mask)
            states = (predict_proba(forest, test.X) >= DECISION_THRESHOLD).astype(np.uint8)
            per_user[user] = classification_metrics(states, test.y)
        accs = [per_user[u].accuracy for u in users]
        p = paired_pvalue(accs, base_acc) if rows else float("nan")
        if not rows:
            base_acc = accs
        rows.append(
            PersonalizationRow(
                fraction=frac, metrics=_mean_metrics(list(per_user.values())),
                per_user=per_user, p_vs_first=p,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Duration-distribution comparison


def duration_distribution_test(
    estimates: Sequence[SleepEstimate], truths: Sequence[GroundTruthDay]
) -> tuple[float, float, float]:
    """Two-sample KS test between estimated and true duration distributions.

    Returns (p_value, mean_estimated, mean_true).
    """
    idx = truth_index(truths)
    est_dur, true_dur = [], []
    for e in estimates:
        t = idx.get((e.user_id, e.day))
        if t is None:
            continue
        est_dur.append(e.duration_min)
        true_dur.append((t.sleep_end - t.sleep_start).total_seconds() / 60.0)
    if len(est_dur) < 2:
        return float("nan"), float("nan"), float("nan")
    res = scipy_stats.ks_2samp(est_dur, true_dur)
    return float(res.pvalue), float(np.mean(est_dur)), float(np.mean(true_dur))
