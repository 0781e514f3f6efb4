"""Nightly sleep estimation from per-minute state predictions.

Pipeline: flag low-confidence minutes, smooth the binary state sequence
(trailing moving average by default, block aggregation with Savitzky-Golay
smoothing as the alternative), take the longest run of sleep states as the
nocturnal sleep period, and gate the estimate by the fraction of flagged
minutes inside that run.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, NoSleepDetected, NoVariance
from .smoothing import agg_smooth, longest_run, mva_smooth


@dataclass(frozen=True)
class ConfidenceConfig:
    """How low-confidence minutes are flagged.

    ``user_band`` draws n_samples predictions (with replacement) from the
    user's prediction pool and flags minutes outside mean +/- z*stddev.
    ``boundary_significance`` instead flags minutes whose variance-based
    interval straddles the 0.5 decision boundary.
    """

    level: float = 0.95
    n_samples: int = 1000
    mode: str = "user_band"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ConfigError(f"confidence level must be in (0,1), got {self.level}")
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")
        if self.mode not in ("user_band", "boundary_significance"):
            raise ConfigError(f"unknown confidence mode {self.mode!r}")

    @property
    def z(self) -> float:
        return float(norm.ppf((1 + self.level) / 2))


@dataclass(frozen=True)
class StatePrediction:
    """One minute's classification outcome."""

    minute_index: int
    probability: float
    variance_raw: float
    variance_corrected: float
    state: int
    low_confidence: int


@dataclass
class DayPredictions:
    """Per-minute predictions for one (user, day) window."""

    user_id: str
    day: str
    window_start: datetime
    interval: int
    probs: np.ndarray
    var_raw: np.ndarray
    var_corrected: np.ndarray
    states: np.ndarray
    labels: np.ndarray | None = None

    @property
    def slots(self) -> int:
        return self.probs.shape[0]

    def minute(self, i: int, flag: int = 0) -> StatePrediction:
        return StatePrediction(
            minute_index=i,
            probability=float(self.probs[i]),
            variance_raw=float(self.var_raw[i]),
            variance_corrected=float(self.var_corrected[i]),
            state=int(self.states[i]),
            low_confidence=flag,
        )


@dataclass
class SleepEstimate:
    user_id: str
    day: str
    t_sleep: datetime
    t_wake: datetime
    duration_min: float
    uncertainty_rate: float
    accepted: bool
    threshold_used: float
    method: str
    repeat: int = 0


def confidence_band(probs: np.ndarray, cfg: ConfidenceConfig) -> tuple[float, float]:
    """Band from a resampled prediction pool: mean +/- z * sample stddev."""
    probs = np.asarray(probs, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    sample = probs[rng.integers(0, probs.shape[0], cfg.n_samples)]
    mu = float(sample.mean())
    sd = float(sample.std(ddof=1))
    return mu - cfg.z * sd, mu + cfg.z * sd


def confidence_flags(
    probs: np.ndarray,
    cfg: ConfidenceConfig,
    variances: np.ndarray | None = None,
    band: tuple[float, float] | None = None,
    decision_threshold: float = 0.5,
) -> np.ndarray:
    """Flag each minute (1 = low confidence) under the configured mode.

    In user_band mode the band defaults to one computed from ``probs``
    itself; callers with a wider per-user pool pass ``band`` explicitly.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if cfg.mode == "user_band":
        if band is None:
            band = confidence_band(probs, cfg)
        lo, hi = band
        return ((probs < lo) | (probs > hi)).astype(np.uint8)
    if variances is None:
        raise NoVariance("boundary_significance mode needs per-minute variances")
    half = cfg.z * np.sqrt(np.asarray(variances, dtype=np.float64))
    return (
        (probs - half <= decision_threshold) & (decision_threshold <= probs + half)
    ).astype(np.uint8)


def uncertainty_rate(run: tuple[int, int], flags: np.ndarray) -> float:
    """Fraction of flagged minutes inside the run (endpoints inclusive)."""
    start, end = run
    seg = np.asarray(flags)[start : end + 1]
    return float(seg.mean())


def estimate_sleep(
    preds: DayPredictions,
    flags: np.ndarray,
    method: str = "mva",
    threshold: float = 0.05,
    mva_window: int = 5,
    agg_window: int = 30,
    sg_window: int = 5,
    sg_degree: int = 2,
    repeat: int = 0,
) -> SleepEstimate:
    """Smooth, extract the longest sleep run, and gate by uncertainty.

    The gate only sets ``accepted``; timing fields never depend on it.
    """
    if method == "mva":
        smoothed = mva_smooth(preds.states, mva_window)
    elif method == "agg":
        smoothed = agg_smooth(preds.states, agg_window, sg_window, sg_degree)
    else:
        raise ConfigError(f"unknown estimation method {method!r}")
    run = longest_run(smoothed)
    if run is None:
        raise NoSleepDetected(f"no sleep run for {preds.user_id} {preds.day}")
    start, end = run
    rate = uncertainty_rate(run, flags)
    sec = preds.interval
    t_sleep = preds.window_start + timedelta(seconds=start * sec)
    t_wake = preds.window_start + timedelta(seconds=(end + 1) * sec)
    return SleepEstimate(
        user_id=preds.user_id,
        day=preds.day,
        t_sleep=t_sleep,
        t_wake=t_wake,
        duration_min=(end - start + 1) * sec / 60.0,
        uncertainty_rate=rate,
        accepted=bool(rate <= threshold),
        threshold_used=threshold,
        method=method,
        repeat=repeat,
    )


# ---------------------------------------------------------------------------
# estimates.csv


def write_estimates(path, estimates, header_comment: str | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(
            "user_id,day,t_sleep,t_wake,duration_min,uncertainty_rate,accepted,method\n"
        )
        for e in sorted(estimates, key=lambda e: (e.user_id, e.day, e.repeat)):
            fh.write(
                f"{e.user_id},{e.day},"
                f"{e.t_sleep.strftime('%Y-%m-%dT%H:%M:%SZ')},"
                f"{e.t_wake.strftime('%Y-%m-%dT%H:%M:%SZ')},"
                f"{e.duration_min:g},{e.uncertainty_rate:.6f},"
                f"{int(e.accepted)},{e.method}\n"
            )


def read_estimates(path) -> list[SleepEstimate]:
    from datetime import timezone

    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("user_id,"):
                continue
            p = line.split(",")
            t_sleep = datetime.strptime(p[2], "%Y-%m-%dT%H:%M:%SZ").replace(
                tzinfo=timezone.utc
            )
            t_wake = datetime.strptime(p[3], "%Y-%m-%dT%H:%M:%SZ").replace(
                tzinfo=timezone.utc
            )
            out.append(
                SleepEstimate(
                    user_id=p[0],
                    day=p[1],
                    t_sleep=t_sleep,
                    t_wake=t_wake,
                    duration_min=float(p[4]),
                    uncertainty_rate=float(p[5]),
                    accepted=bool(int(p[6])),
                    threshold_used=float("nan"),
                    method=p[7],
                )
            )
    return out
