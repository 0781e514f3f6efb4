"""Batch pipeline: synth|ingest -> featurize -> train -> predict -> estimate
-> evaluate, with every artifact stamped by the config hash and seed.

Stages share an in-memory state when run together and reload their inputs
from the output directory when run selectively, so a prebuilt model can be
applied without retraining.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import records as rec_mod
from . import synth as synth_mod
from .config import PipelineConfig, forest_params_from_config, require_paths
from .errors import ConfigError, DataError
from .estimate import ConfidenceConfig, confidence_band, confidence_flags, write_estimates
from .evaluate import (
    Cohort,
    DEVICE_SUBSETS,
    ablation_devices,
    classification_metrics,
    day_window_meta,
    duration_distribution_test,
    estimates_from_folds,
    frequency_sweep,
    retention_curve,
    run_louo,
    timing_errors,
)
from .features import build_dataset, featurize, read_features, select_features, correlation_matrix, write_features
from .forest import predict_proba, ij_variance_batch
from .model_io import model_load
from .synth import gen_cohort, load_cohort_spec, preset_cohort, read_truth, truth_index, write_truth

log = logging.getLogger("somnus")

STAGES = ("synth", "ingest", "featurize", "train", "predict", "estimate", "evaluate")


@dataclass
class PipelineState:
    records: list | None = None
    registry: object | None = None
    truths: list | None = None
    series: list | None = None
    labels: dict | None = None
    louo: object | None = None
    estimates: list | None = None
    outputs: list[str] = field(default_factory=list)


def _out(cfg: PipelineConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, name)


def _filter_policy(cfg: PipelineConfig) -> rec_mod.FilterPolicy:
    return rec_mod.FilterPolicy(
        min_rssi=cfg.ingest.min_rssi,
        require_associated=cfg.ingest.require_associated,
        drop_invalid_timestamp=cfg.ingest.drop_invalid_timestamp,
    )


def stage_synth(cfg: PipelineConfig, state: PipelineState) -> None:
    if cfg.synth.spec:
        spec = load_cohort_spec(cfg.synth.spec)
    elif cfg.synth.preset:
        spec = preset_cohort(
            cfg.synth.preset, n_users=cfg.synth.users, days=cfg.synth.days,
            timezone_name=cfg.timezone,
        )
    else:
        raise ConfigError("stage 'synth' requires synth.preset or synth.spec")
    registry, truths, rec_iter = gen_cohort(spec, cfg.seed)
    state.records = list(rec_iter)
    state.registry = registry
    state.truths = truths
    hdr = cfg.header_comment()
    rec_mod.write_records(_out(cfg, "trace.csv"), state.records, hdr)
    rec_mod.write_registry(_out(cfg, "registry.csv"), registry, hdr)
    write_truth(_out(cfg, "truth.csv"), truths, hdr)
    state.outputs += ["trace.csv", "registry.csv", "truth.csv"]
    log.info("synth: %d records, %d users, %d truth days",
             len(state.records), len(registry.users()), len(truths))


def _load_trace_inputs(cfg: PipelineConfig, state: PipelineState) -> None:
    if state.records is not None:
        return
    trace = cfg.paths.trace or _out(cfg, "trace.csv")
    registry = cfg.paths.registry or _out(cfg, "registry.csv")
    if not os.path.exists(trace) or not os.path.exists(registry):
        require_paths(cfg, "ingest", ["trace", "registry"])
    summary = rec_mod.IngestSummary()
    state.records = rec_mod.read_records(trace, summary)
    state.registry = rec_mod.read_registry(registry)
    if summary.errors:
        log.warning("ingest: skipped %d malformed lines", len(summary.errors))
    truth = cfg.paths.truth or _out(cfg, "truth.csv")
    if state.truths is None and os.path.exists(truth):
        state.truths = read_truth(truth)


def stage_ingest(cfg: PipelineConfig, state: PipelineState) -> None:
    _load_trace_inputs(cfg, state)
    policy = _filter_policy(cfg)
    kept = list(rec_mod.filter_records(state.records, policy))
    dropped = len(state.records) - len(kept)
    registry = state.registry
    if cfg.ingest.salt:
        salt = bytes.fromhex(cfg.ingest.salt)
        kept = list(rec_mod.anonymize(kept, salt))
        registry = rec_mod.anonymize_registry(registry, salt)
        state.registry = registry
    state.records = kept
    hdr = cfg.header_comment()
    rec_mod.write_records(_out(cfg, "filtered.csv"), kept, hdr)
    rec_mod.write_registry(_out(cfg, "registry_filtered.csv"), registry, hdr)
    state.outputs += ["filtered.csv", "registry_filtered.csv"]
    log.info("ingest: kept %d records, dropped %d", len(kept), dropped)


def stage_featurize(cfg: PipelineConfig, state: PipelineState) -> None:
    if state.records is None:
        filtered = _out(cfg, "filtered.csv")
        if os.path.exists(filtered):
            state.records = rec_mod.read_records(filtered)
            state.registry = rec_mod.read_registry(_out(cfg, "registry_filtered.csv"))
            truth = cfg.paths.truth or _out(cfg, "truth.csv")
            if os.path.exists(truth):
                state.truths = read_truth(truth)
        else:
            _load_trace_inputs(cfg, state)
            state.records = list(rec_mod.filter_records(state.records, _filter_policy(cfg)))
    res = featurize(
        state.records, state.registry, interval=cfg.featurize.interval, tz=cfg.timezone
    )
    state.series = res.series
    labels = None
    if state.truths:
        idx = truth_index(state.truths)
        labels = {}
        for s in res.series:
            t = idx.get((s.user_id, s.day))
            if t is not None:
                from .features import label_series

                labels[(s.user_id, s.day)] = label_series(s, t)
    state.labels = labels
    write_features(_out(cfg, "features.csv"), res.series, labels, cfg.header_comment())
    state.outputs.append("features.csv")
    if res.unknown_mac_records:
        log.warning("featurize: %d records with unknown MACs skipped",
                    res.unknown_mac_records)
    log.info("featurize: %d day series", len(res.series))


def _require_features(cfg: PipelineConfig, state: PipelineState) -> None:
    if state.series is None:
        path = _out(cfg, "features.csv")
        if not os.path.exists(path):
            raise ConfigError(
                "stage needs features; run the featurize stage first or place "
                f"features.csv in {cfg.out_dir}"
            )
        state.series, labels = read_features(path)
        state.labels = labels or None
        truth = cfg.paths.truth or _out(cfg, "truth.csv")
        if state.truths is None and os.path.exists(truth):
            state.truths = read_truth(truth)


def _labeled_dataset(state: PipelineState):
    if not state.labels:
        raise DataError("training needs labeled features (no ground truth joined)")
    pairs = [
        (s, state.labels[(s.user_id, s.day)])
        for s in state.series
        if (s.user_id, s.day) in state.labels
    ]
    from .features import LabeledDataset

    return LabeledDataset.from_labeled_series(pairs)


def stage_train_predict(cfg: PipelineConfig, state: PipelineState, do_train: bool) -> None:
    """Shared by the train and predict stages.

    With a prebuilt model configured and training skipped, the model is
    applied to every user's full day set instead of LOUO folds.
    """
    _require_features(cfg, state)
    meta = day_window_meta(state.series)
    if not do_train and cfg.paths.model:
        require_paths(cfg, "predict", ["model"])
        forest = model_load(cfg.paths.model)
        ds = _labeled_dataset(state)
        folds = []
        from .evaluate import Fold, _predict_days

        for user in sorted(set(ds.user_ids.tolist())):
            user_ds = ds.for_user(user)
            days = sorted(set(user_ds.days.tolist()))
            preds = _predict_days(forest, user_ds, days, meta)
            states = np.concatenate([p.states for p in preds])
            labels = np.concatenate([p.labels for p in preds])
            folds.append(
                Fold(user, 0, preds, classification_metrics(states, labels), [], days)
            )
        from .evaluate import LouoResult

        state.louo = LouoResult(
            per_user={f.user_id: f.metrics for f in folds}, folds=folds, manifest=[]
        )
    else:
        ds = _labeled_dataset(state)
        state.louo = run_louo(
            ds,
            forest_params_from_config(cfg),
            personalize_fraction=cfg.personalize.fraction,
            repeats=cfg.personalize.repeats,
            seed=cfg.seed,
            window_meta=meta,
            jobs=cfg.jobs,
        )
    _write_predictions(cfg, state)
    _write_manifest(cfg, state)


def _write_predictions(cfg: PipelineConfig, state: PipelineState) -> None:
    path = _out(cfg, "predictions.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {cfg.header_comment()}\n")
        fh.write(
            "user_id,day,repeat,minute_index,probability,variance_raw,"
            "variance_corrected,state,label\n"
        )
        for fold in sorted(state.louo.folds, key=lambda f: (f.user_id, f.repeat)):
            for p in sorted(fold.predictions, key=lambda p: p.day):
                for i in range(p.slots):
                    lab = "" if p.labels is None else str(int(p.labels[i]))
                    fh.write(
                        f"{p.user_id},{p.day},{fold.repeat},{i},"
                        f"{p.probs[i]:.6f},{p.var_raw[i]:.6e},"
                        f"{p.var_corrected[i]:.6e},{int(p.states[i])},{lab}\n"
                    )
    state.outputs.append("predictions.csv")


def _write_manifest(cfg: PipelineConfig, state: PipelineState) -> None:
    path = _out(cfg, "split_manifest.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {cfg.header_comment()}\n")
        fh.write("user_id,repeat,fraction,train_days,test_days,day_seed,forest_seed\n")
        for row in state.louo.manifest:
            fh.write(
                f"{row['user_id']},{row['repeat']},{row['fraction']},"
                f"{row['train_days']},{row['test_days']},{row['day_seed']},"
                f"{row['forest_seed']}\n"
            )
    state.outputs.append("split_manifest.csv")


def stage_estimate(cfg: PipelineConfig, state: PipelineState) -> None:
    if state.louo is None:
        stage_train_predict(cfg, state, do_train=False if cfg.paths.model else True)
    ccfg = ConfidenceConfig(
        level=cfg.confidence.level,
        n_samples=cfg.confidence.samples,
        mode=cfg.confidence.mode,
        seed=cfg.seed,
    )
    state.estimates = estimates_from_folds(
        state.louo.folds,
        ccfg,
        method=cfg.estimate.method,
        threshold=cfg.estimate.threshold,
        mva_window=cfg.estimate.window,
        agg_window=cfg.estimate.agg_window,
        sg_window=cfg.estimate.sg_window,
        sg_degree=cfg.estimate.sg_degree,
    )
    first_repeat = [e for e in state.estimates if e.repeat == 0]
    write_estimates(_out(cfg, "estimates.csv"), first_repeat, cfg.header_comment())
    state.outputs.append("estimates.csv")
    log.info("estimate: %d estimates, %d accepted",
             len(first_repeat), sum(e.accepted for e in first_repeat))


def stage_evaluate(cfg: PipelineConfig, state: PipelineState) -> None:
    if state.estimates is None:
        stage_estimate(cfg, state)
    hdr = cfg.header_comment()

    with open(_out(cfg, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"# {hdr}\n")
        fh.write("user_id,accuracy,precision,recall,f1,f1_weighted,tp,fp,tn,fn\n")
        for user in sorted(state.louo.per_user):
            m = state.louo.per_user[user]
            fh.write(
                f"{user},{m.accuracy:.6f},{m.precision:.6f},{m.recall:.6f},"
                f"{m.f1:.6f},{m.f1_weighted:.6f},{m.tp},{m.fp},{m.tn},{m.fn}\n"
            )
        m = state.louo.macro
        fh.write(
            f"__macro__,{m.accuracy:.6f},{m.precision:.6f},{m.recall:.6f},"
            f"{m.f1:.6f},{m.f1_weighted:.6f},{m.tp},{m.fp},{m.tn},{m.fn}\n"
        )
    state.outputs.append("metrics.csv")

    if state.truths:
        accepted = [e for e in state.estimates if e.accepted]
        stats = timing_errors(accepted if accepted else state.estimates, state.truths)
        with open(_out(cfg, "errors_stats.csv"), "w", encoding="utf-8") as fh:
            fh.write(f"# {hdr}\n")
            fh.write("target,median,mean,max,min,mode,stddev,q1,q3,uif,uof,n\n")
            for name, s in (
                ("t_sleep", stats.t_sleep),
                ("t_wake", stats.t_wake),
                ("duration", stats.duration),
            ):
                fh.write(
                    f"{name},{s.median:.2f},{s.mean:.2f},{s.max:.2f},{s.min:.2f},"
                    f"{s.mode:.0f},{s.stddev:.2f},{s.q1:.2f},{s.q3:.2f},"
                    f"{s.uif:.2f},{s.uof:.2f},{s.n}\n"
                )
        state.outputs.append("errors_stats.csv")

        curve = retention_curve(state.estimates, list(cfg.evaluate.thresholds), state.truths)
        with open(_out(cfg, "retention.csv"), "w", encoding="utf-8") as fh:
            fh.write(f"# {hdr}\n")
            fh.write("threshold,retained_fraction,mean_t_sleep_error,mean_t_wake_error,n_retained\n")
            for pt in curve:
                fh.write(
                    f"{pt.threshold:g},{pt.retained_fraction:.6f},"
                    f"{pt.mean_t_sleep_error:.3f},{pt.mean_t_wake_error:.3f},{pt.n_retained}\n"
                )
        state.outputs.append("retention.csv")

        idx = truth_index(state.truths)
        with open(_out(cfg, "per_day.csv"), "w", encoding="utf-8") as fh:
            fh.write(f"# {hdr}\n")
            fh.write(
                "user_id,day,repeat,est_sleep,est_wake,true_sleep,true_wake,"
                "est_duration_min,true_duration_min,uncertainty_rate,accepted\n"
            )
            for e in sorted(state.estimates, key=lambda e: (e.user_id, e.day, e.repeat)):
                t = idx.get((e.user_id, e.day))
                if t is None:
                    continue
                true_dur = (t.sleep_end - t.sleep_start).total_seconds() / 60.0
                fh.write(
                    f"{e.user_id},{e.day},{e.repeat},"
                    f"{e.t_sleep.strftime('%Y-%m-%dT%H:%M:%SZ')},"
                    f"{e.t_wake.strftime('%Y-%m-%dT%H:%M:%SZ')},"
                    f"{t.sleep_start.strftime('%Y-%m-%dT%H:%M:%SZ')},"
                    f"{t.sleep_end.strftime('%Y-%m-%dT%H:%M:%SZ')},"
                    f"{e.duration_min:g},{true_dur:g},{e.uncertainty_rate:.6f},"
                    f"{int(e.accepted)}\n"
                )
        state.outputs.append("per_day.csv")

        ks_p, est_mean, true_mean = duration_distribution_test(
            [e for e in state.estimates if e.accepted], state.truths
        )
        with open(_out(cfg, "duration_comparison.csv"), "w", encoding="utf-8") as fh:
            fh.write(f"# {hdr}\n")
            fh.write("ks_pvalue,mean_estimated_min,mean_true_min\n")
            fh.write(f"{ks_p:.6f},{est_mean:.2f},{true_mean:.2f}\n")
        state.outputs.append("duration_comparison.csv")

    if cfg.evaluate.ablation or cfg.evaluate.sweep:
        cohort = Cohort(
            records=state.records,
            registry=state.registry,
            truths=state.truths,
            tz=cfg.timezone,
            policy=_filter_policy(cfg),
        )
        params = forest_params_from_config(cfg)
        if cfg.evaluate.ablation:
            rows = ablation_devices(
                cohort, DEVICE_SUBSETS, params,
                personalize_fraction=cfg.personalize.fraction,
                repeats=1, seed=cfg.seed, jobs=cfg.jobs,
            )
            with open(_out(cfg, "ablation.csv"), "w", encoding="utf-8") as fh:
                fh.write(f"# {hdr}\n")
                fh.write("subset,accuracy,precision,recall,f1,p_vs_smartphone\n")
                for r in rows:
                    fh.write(
                        f"{r.subset},{r.metrics.accuracy:.6f},{r.metrics.precision:.6f},"
                        f"{r.metrics.recall:.6f},{r.metrics.f1:.6f},{r.p_vs_first:.6f}\n"
                    )
            state.outputs.append("ablation.csv")
        if cfg.evaluate.sweep:
            rows = frequency_sweep(
                cohort, list(cfg.evaluate.sweep), params,
                personalize_fraction=cfg.personalize.fraction,
                repeats=1, seed=cfg.seed, jobs=cfg.jobs,
            )
            with open(_out(cfg, "sweep.csv"), "w", encoding="utf-8") as fh:
                fh.write(f"# {hdr}\n")
                fh.write("interval_s,is_default,accuracy,precision,recall,f1\n")
                for r in rows:
                    fh.write(
                        f"{r.interval},{int(r.is_default)},{r.metrics.accuracy:.6f},"
                        f"{r.metrics.precision:.6f},{r.metrics.recall:.6f},"
                        f"{r.metrics.f1:.6f}\n"
                    )
            state.outputs.append("sweep.csv")


def run_pipeline(cfg: PipelineConfig, stages: list[str] | None = None) -> PipelineState:
    """Run the configured stages in order; returns the final state."""
    if stages is None:
        head = ["synth", "ingest"] if (cfg.synth.preset or cfg.synth.spec) else ["ingest"]
        stages = head + ["featurize", "train", "predict", "estimate", "evaluate"]
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stage(s): {bad}; valid: {list(STAGES)}")
    stages = [s for s in STAGES if s in stages]

    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(_out(cfg, "config_echo.yaml"), "w", encoding="utf-8") as fh:
        fh.write(f"# {cfg.header_comment()}\n")
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)

    state = PipelineState()
    trained = False
    for stage in stages:
        log.info("stage: %s", stage)
        if stage == "synth":
            stage_synth(cfg, state)
        elif stage == "ingest":
            stage_ingest(cfg, state)
        elif stage == "featurize":
            stage_featurize(cfg, state)
        elif stage == "train":
            stage_train_predict(cfg, state, do_train=True)
            trained = True
        elif stage == "predict":
            if not trained:
                stage_train_predict(cfg, state, do_train=False)
        elif stage == "estimate":
            stage_estimate(cfg, state)
        elif stage == "evaluate":
            stage_evaluate(cfg, state)
    return state
