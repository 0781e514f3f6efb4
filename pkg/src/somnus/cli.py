"""Command-line entry point.

Subcommands mirror the pipeline stages plus a one-shot ``run``. Exit codes:
0 ok, 2 config error, 3 data error, 4 internal error. Set SOMNUS_LOG to
debug/info/warning to control verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import SomnusError


def _setup_logging():
    level = os.environ.get("SOMNUS_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _add_seed(p, required=False):
    p.add_argument("--seed", type=int, required=required, default=None,
                   help="master seed (required for generation/training)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="somnus",
        description="Sleep-period estimation from multi-device WiFi association logs",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="cohort spec YAML")
    src.add_argument("--preset", help="built-in cohort (acceptance|standard|clean|tiny)")
    p.add_argument("--users", type=int, default=None)
    p.add_argument("--days", type=int, default=None)
    p.add_argument("--tz", default="UTC")
    _add_seed(p, required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("ingest", help="parse, filter, and optionally anonymize a trace")
    p.add_argument("--input", required=True, help="trace CSV")
    p.add_argument("--registry", required=True, help="device registry CSV")
    p.add_argument("--min-rssi", type=int, default=-85)
    p.add_argument("--keep-unassociated", action="store_true")
    p.add_argument("--keep-invalid-timestamps", action="store_true")
    p.add_argument("--salt", default=None, help="hex salt; enables anonymization")
    p.add_argument("--out", required=True, help="filtered trace output")
    p.add_argument("--registry-out", default=None,
                   help="where to write the (possibly anonymized) registry")

    p = sub.add_parser("featurize", help="bucket a filtered trace into feature series")
    p.add_argument("--input", required=True, help="filtered trace CSV")
    p.add_argument("--registry", required=True)
    p.add_argument("--truth", default=None, help="ground-truth CSV for labels")
    p.add_argument("--tz", default="UTC")
    p.add_argument("--interval", type=int, default=60)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one semi-personalized forest")
    p.add_argument("--features", required=True)
    p.add_argument("--user", required=True, help="target user id")
    p.add_argument("--personalize", type=float, default=0.4)
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--min-split", type=int, default=5)
    p.add_argument("--d", type=int, default=5, help="features per split")
    p.add_argument("--max-depth", type=int, default=None)
    _add_seed(p, required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("predict", help="apply a saved model to labeled features")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("estimate", help="nightly sleep estimates from a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--method", choices=("mva", "agg"), default="mva")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--mode", choices=("user_band", "boundary_significance"),
                   default="user_band")
    _add_seed(p, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="full evaluation over a cohort directory")
    p.add_argument("--cohort", required=True,
                   help="directory with trace.csv, registry.csv, truth.csv")
    p.add_argument("--config", default=None, help="pipeline config YAML")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("run", help="run the configured pipeline end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--stages", default=None,
                   help="comma-separated subset of "
                        "synth,ingest,featurize,train,predict,estimate,evaluate")
    p.add_argument("--out-dir", default=None, help="override config out_dir")
    _add_seed(p)
    p.add_argument("--jobs", type=int, default=None)
    return ap


def _cmd_synth(args) -> int:
    from .records import write_records, write_registry
    from .synth import gen_cohort, load_cohort_spec, preset_cohort, write_truth

    if args.spec:
        spec = load_cohort_spec(args.spec)
    else:
        spec = preset_cohort(args.preset, n_users=args.users, days=args.days,
                             timezone_name=args.tz)
    registry, truths, rec_iter = gen_cohort(spec, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    hdr = f"seed={args.seed}"
    write_records(os.path.join(args.out_dir, "trace.csv"), rec_iter, hdr)
    write_registry(os.path.join(args.out_dir, "registry.csv"), registry, hdr)
    write_truth(os.path.join(args.out_dir, "truth.csv"), truths, hdr)
    return 0


def _cmd_ingest(args) -> int:
    from .records import (
        FilterPolicy,
        IngestSummary,
        anonymize,
        anonymize_registry,
        filter_records,
        parse_rtls,
        read_registry,
        write_records,
        write_registry,
    )

    policy = FilterPolicy(
        min_rssi=args.min_rssi,
        require_associated=not args.keep_unassociated,
        drop_invalid_timestamp=not args.keep_invalid_timestamps,
    )
    registry = read_registry(args.registry)
    summary = IngestSummary()
    with open(args.input, "r", encoding="utf-8") as fh:
        kept = list(filter_records(parse_rtls(fh, summary), policy))
    if args.salt:
        salt = bytes.fromhex(args.salt)
        kept = list(anonymize(kept, salt))
        registry = anonymize_registry(registry, salt)
    write_records(args.out, kept, f"min_rssi={args.min_rssi}")
    if args.registry_out:
        write_registry(args.registry_out, registry)
    print(
        f"parsed={summary.parsed} malformed={len(summary.errors)} kept={len(kept)}",
        file=sys.stderr,
    )
    return 0


def _cmd_featurize(args) -> int:
    from .features import featurize, label_series, write_features
    from .records import read_records, read_registry
    from .synth import read_truth, truth_index

    records = read_records(args.input)
    registry = read_registry(args.registry)
    res = featurize(records, registry, interval=args.interval, tz=args.tz)
    labels = None
    if args.truth:
        idx = truth_index(read_truth(args.truth))
        labels = {}
        for s in res.series:
            t = idx.get((s.user_id, s.day))
            if t is not None:
                labels[(s.user_id, s.day)] = label_series(s, t)
    write_features(args.out, res.series, labels)
    if res.unknown_mac_records:
        print(f"unknown_mac_records={res.unknown_mac_records}", file=sys.stderr)
    return 0


def _load_labeled(features_path):
    from .features import LabeledDataset, read_features

    series, labels = read_features(features_path)
    pairs = [
        (s, labels[(s.user_id, s.day)])
        for s in series
        if (s.user_id, s.day) in labels
    ]
    from .errors import DataError

    if not pairs:
        raise DataError(f"{features_path} has no labeled rows")
    return series, LabeledDataset.from_labeled_series(pairs)


def _cmd_train(args) -> int:
    from .forest import ForestParams, train_semi_personalized
    from .model_io import model_save

    _, ds = _load_labeled(args.features)
    params = ForestParams(
        n_trees=args.trees,
        features_per_split=args.d,
        min_samples_split=args.min_split,
        max_depth=args.max_depth,
        seed=args.seed,
    )
    general = ds.for_user(args.user, invert=True)
    target = ds.for_user(args.user)
    from .errors import DataError

    if len(target) == 0:
        raise DataError(f"user {args.user!r} absent from {args.features}")
    forest, held_out = train_semi_personalized(
        general, target, fraction=args.personalize, params=params,
        day_seed=args.seed, jobs=args.jobs,
    )
    checksum = model_save(forest, args.model_out)
    print(f"model={args.model_out} sha256={checksum[:16]} "
          f"held_out_days={';'.join(held_out)}", file=sys.stderr)
    return 0


def _cmd_predict(args) -> int:
    from .forest import ij_variance_batch, predict_proba
    from .model_io import model_load

    series, _ = _load_labeled(args.features)
    forest = model_load(args.model)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("user_id,day,minute_index,probability,variance_raw,"
                 "variance_corrected,state\n")
        for s in sorted(series, key=lambda s: (s.user_id, s.day)):
            probs = predict_proba(forest, s.X.astype(float))
            ij = ij_variance_batch(forest, s.X.astype(float))
            for i in range(s.slots):
                fh.write(
                    f"{s.user_id},{s.day},{i},{probs[i]:.6f},{ij.raw[i]:.6e},"
                    f"{ij.corrected[i]:.6e},{int(probs[i] >= 0.5)}\n"
                )
    return 0


def _cmd_estimate(args) -> int:
    from .estimate import (
        ConfidenceConfig,
        DayPredictions,
        confidence_band,
        confidence_flags,
        estimate_sleep,
        write_estimates,
    )
    from .errors import NoSleepDetected
    from .forest import ij_variance_batch, predict_proba
    from .model_io import model_load

    series, _ = _load_labeled(args.features)
    forest = model_load(args.model)
    cfg = ConfidenceConfig(mode=args.mode, seed=args.seed)
    by_user: dict[str, list] = {}
    for s in sorted(series, key=lambda s: (s.user_id, s.day)):
        probs = predict_proba(forest, s.X.astype(float))
        ij = ij_variance_batch(forest, s.X.astype(float))
        preds = DayPredictions(
            user_id=s.user_id, day=s.day, window_start=s.window_start,
            interval=s.interval, probs=probs, var_raw=ij.raw,
            var_corrected=ij.corrected,
            states=(probs >= 0.5).astype("uint8"),
        )
        by_user.setdefault(s.user_id, []).append(preds)
    import numpy as np

    estimates = []
    for user, preds_list in sorted(by_user.items()):
        band = None
        if cfg.mode == "user_band":
            band = confidence_band(np.concatenate([p.probs for p in preds_list]), cfg)
        for preds in preds_list:
            flags = confidence_flags(preds.probs, cfg, variances=preds.var_corrected,
                                     band=band)
            try:
                estimates.append(
                    estimate_sleep(preds, flags, method=args.method,
                                   threshold=args.threshold, mva_window=args.window)
                )
            except NoSleepDetected:
                continue
    write_estimates(args.out, estimates)
    return 0


def _cmd_evaluate(args) -> int:
    from .config import PipelineConfig, load_config
    from .pipeline import run_pipeline
    from dataclasses import replace

    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg = replace(
        cfg,
        out_dir=args.out,
        jobs=args.jobs,
        paths=replace(
            cfg.paths,
            trace=os.path.join(args.cohort, "trace.csv"),
            registry=os.path.join(args.cohort, "registry.csv"),
            truth=os.path.join(args.cohort, "truth.csv"),
        ),
        synth=replace(cfg.synth, preset=None, spec=None),
    )
    run_pipeline(cfg, ["ingest", "featurize", "train", "predict", "estimate", "evaluate"])
    return 0


def _cmd_run(args) -> int:
    from .config import load_config, merge_overrides
    from .pipeline import run_pipeline

    cfg = load_config(args.config)
    cfg = merge_overrides(cfg, out_dir=args.out_dir, seed=args.seed, jobs=args.jobs)
    stages = args.stages.split(",") if args.stages else None
    run_pipeline(cfg, stages)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "featurize": _cmd_featurize,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "estimate": _cmd_estimate,
    "evaluate": _cmd_evaluate,
    "run": _cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SomnusError as e:
        print(f"somnus: error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:  # pragma: no cover - internal failure path
        logging.getLogger("somnus").exception("internal error")
        print(f"somnus: internal error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
