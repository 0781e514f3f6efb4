"""Per-interval activity features over the local 18:00-to-18:00 day window.

Each (user, day) becomes a dense series of slots (1440 for the default
60-second interval). Ten features per slot: connection-event counts and
distinct-AP counts for each of the four personal device classes, plus the
all-device totals. Devices registered as ``shared`` contribute to the
all-device aggregates only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, time, timedelta, timezone
from typing import Iterable, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .errors import InsufficientData, NoOverlap
from .records import DeviceRegistry, RtlsRecord

FEATURE_CLASSES = ("smartphone_personal", "smartphone_study", "laptop", "tablet")

FEATURE_NAMES = (
    tuple(f"net_events_{c}" for c in FEATURE_CLASSES)
    + tuple(f"unique_aps_{c}" for c in FEATURE_CLASSES)
    + ("all_net_events", "all_unique_aps")
)

N_FEATURES = len(FEATURE_NAMES)
_ALL_EVENTS_COL = 8
_ALL_APS_COL = 9

WINDOW_HOUR = 18
DAY_SECONDS = 86400


@dataclass
class DaySeries:
    """Dense feature series for one user over one 18:00-to-18:00 window."""

    user_id: str
    day: str  # ISO date of the window's local anchor
    window_start: datetime  # UTC instant of local 18:00
    interval: int
    X: np.ndarray  # (slots, N_FEATURES) int32

    @property
    def slots(self) -> int:
        return self.X.shape[0]


@dataclass
class FeaturizeResult:
    series: list[DaySeries]
    unknown_mac_records: int = 0
    unknown_macs: set = field(default_factory=set)


def window_anchor(ts_utc: datetime, tz: ZoneInfo) -> tuple[str, datetime]:
    """Map a UTC instant to its day window: (anchor date ISO, window start UTC)."""
    local = ts_utc.astimezone(tz)
    anchor = local.date()
    if local.hour < WINDOW_HOUR:
        anchor -= timedelta(days=1)
    # DST shifts can push the instant outside the 24h window of the naive
    # anchor; nudge the anchor until the offset lands inside.
    for _ in range(3):
        start = datetime.combine(anchor, time(WINDOW_HOUR), tzinfo=tz).astimezone(
            timezone.utc
        )
        off = (ts_utc - start).total_seconds()
        if off < 0:
            anchor -= timedelta(days=1)
        elif off >= DAY_SECONDS:
            anchor += timedelta(days=1)
        else:
            return anchor.isoformat(), start
    return anchor.isoformat(), start


def featurize(
    records: Iterable[RtlsRecord],
    registry: DeviceRegistry,
    interval: int = 60,
    tz: str = "UTC",
) -> FeaturizeResult:
    """Bucket filtered records into per-(user, day) feature series.

    Records whose MAC is not in the registry are counted and skipped.
    ``interval`` must divide 86400.
    """
    if interval <= 0 or DAY_SECONDS % interval != 0:
        raise InsufficientData(f"interval must divide {DAY_SECONDS}, got {interval}")
    zone = ZoneInfo(tz)
    slots = DAY_SECONDS // interval
    class_idx = {c: i for i, c in enumerate(FEATURE_CLASSES)}

    acc: dict[tuple[str, str], dict] = {}
    result = FeaturizeResult(series=[])

    for rec in records:
        entry = registry.entries.get(rec.device_mac)
        if entry is None:
            result.unknown_mac_records += 1
            result.unknown_macs.add(rec.device_mac)
            continue
        day, start = window_anchor(rec.timestamp, zone)
        key = (entry.user_id, day)
        bucket = acc.get(key)
        if bucket is None:
            bucket = acc[key] = {
                "start": start,
                "X": np.zeros((slots, N_FEATURES), np.int32),
                "aps": {},  # (slot, class col) -> set of bssids
                "all_aps": {},  # slot -> set of bssids
            }
        slot = int((rec.timestamp - start).total_seconds() // interval)
        ci = class_idx.get(entry.device_class)
        X = bucket["X"]
        if ci is not None:
            X[slot, ci] += 1
            bucket["aps"].setdefault((slot, ci), set()).add(rec.bssid)
        X[slot, _ALL_EVENTS_COL] += 1
        bucket["all_aps"].setdefault(slot, set()).add(rec.bssid)

    for (user_id, day), bucket in sorted(acc.items()):
        X = bucket["X"]
        for (slot, ci), aps in bucket["aps"].items():
            X[slot, len(FEATURE_CLASSES) + ci] = len(aps)
        for slot, aps in bucket["all_aps"].items():
            X[slot, _ALL_APS_COL] = len(aps)
        result.series.append(
            DaySeries(
                user_id=user_id,
                day=day,
                window_start=bucket["start"],
                interval=interval,
                X=X,
            )
        )
    return result


def label_series(series: DaySeries, truth) -> np.ndarray:
    """Binary sleep labels per slot: 1 iff the slot midpoint lies in
    [sleep_start, sleep_end). ``truth`` needs sleep_start/sleep_end instants."""
    window_end = series.window_start + timedelta(seconds=DAY_SECONDS)
    if truth.sleep_end <= series.window_start or truth.sleep_start >= window_end:
        raise NoOverlap(
            f"truth interval {truth.sleep_start}..{truth.sleep_end} outside window "
            f"starting {series.window_start}"
        )
    start_off = (truth.sleep_start - series.window_start).total_seconds()
    end_off = (truth.sleep_end - series.window_start).total_seconds()
    mids = (np.arange(series.slots) + 0.5) * series.interval
    return ((mids >= start_off) & (mids < end_off)).astype(np.uint8)


# ---------------------------------------------------------------------------
# Labeled datasets


@dataclass
class LabeledDataset:
    """Flat training table: one row per (user, day, slot)."""

    X: np.ndarray  # (N, F) float64
    y: np.ndarray  # (N,) uint8
    user_ids: np.ndarray  # (N,) object
    days: np.ndarray  # (N,) object
    slots: np.ndarray  # (N,) int32
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def __len__(self) -> int:
        return self.X.shape[0]

    @classmethod
    def from_arrays(cls, X, y, user_id: str = "u", day: str = "d0") -> "LabeledDataset":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.uint8)
        n = X.shape[0]
        return cls(
            X=X,
            y=y,
            user_ids=np.array([user_id] * n, dtype=object),
            days=np.array([day] * n, dtype=object),
            slots=np.arange(n, dtype=np.int32),
            feature_names=tuple(f"f{i}" for i in range(X.shape[1])),
        )

    @classmethod
    def from_labeled_series(
        cls, pairs: Sequence[tuple[DaySeries, np.ndarray]]
    ) -> "LabeledDataset":
        xs, ys, users, days, slots = [], [], [], [], []
        for series, labels in pairs:
            xs.append(series.X.astype(np.float64))
            ys.append(np.asarray(labels, dtype=np.uint8))
            users.append(np.array([series.user_id] * series.slots, dtype=object))
            days.append(np.array([series.day] * series.slots, dtype=object))
            slots.append(np.arange(series.slots, dtype=np.int32))
        if not xs:
            return cls.empty()
        return cls(
            X=np.concatenate(xs),
            y=np.concatenate(ys),
            user_ids=np.concatenate(users),
            days=np.concatenate(days),
            slots=np.concatenate(slots),
        )

    @classmethod
    def empty(cls, n_features: int = N_FEATURES) -> "LabeledDataset":
        return cls(
            X=np.empty((0, n_features)),
            y=np.empty(0, np.uint8),
            user_ids=np.empty(0, object),
            days=np.empty(0, object),
            slots=np.empty(0, np.int32),
        )

    def subset(self, mask: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            X=self.X[mask],
            y=self.y[mask],
            user_ids=self.user_ids[mask],
            days=self.days[mask],
            slots=self.slots[mask],
            feature_names=self.feature_names,
        )

    def for_user(self, user_id: str, invert: bool = False) -> "LabeledDataset":
        mask = self.user_ids == user_id
        return self.subset(~mask if invert else mask)

    def user_day_list(self) -> list[tuple[str, str]]:
        return sorted({(u, d) for u, d in zip(self.user_ids, self.days)})

    @staticmethod
    def concat(parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            return LabeledDataset.empty()
        return LabeledDataset(
            X=np.concatenate([p.X for p in parts]),
            y=np.concatenate([p.y for p in parts]),
            user_ids=np.concatenate([p.user_ids for p in parts]),
            days=np.concatenate([p.days for p in parts]),
            slots=np.concatenate([p.slots for p in parts]),
            feature_names=parts[0].feature_names,
        )


def build_dataset(
    series: Sequence[DaySeries], truths: dict[tuple[str, str], object]
) -> tuple[LabeledDataset, list[tuple[str, str]]]:
    """Join feature series with ground truth; returns (dataset, unmatched days)."""
    pairs = []
    unmatched = []
    for s in series:
        truth = truths.get((s.user_id, s.day))
        if truth is None:
            unmatched.append((s.user_id, s.day))
            continue
        pairs.append((s, label_series(s, truth)))
    return LabeledDataset.from_labeled_series(pairs), unmatched


# ---------------------------------------------------------------------------
# Correlation-based feature selection


def correlation_matrix(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson correlation across feature columns.

    Constant columns have undefined correlation; their off-diagonal entries
    are reported as 0 and the column is flagged in the returned mask.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise InsufficientData("correlation needs at least 2 samples")
    mean = X.mean(axis=0)
    Xc = X - mean
    std = np.sqrt((Xc * Xc).mean(axis=0))
    constant = std == 0.0
    denom = np.outer(std, std)
    cov = (Xc.T @ Xc) / X.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr, constant


def select_features(
    corr: np.ndarray,
    threshold: float = 0.9,
    feature_names: Sequence[str] | None = None,
) -> list[int]:
    """Drop one member of each feature pair correlated above ``threshold``.

    Preference: keep the event-count feature and drop the distinct-AP twin;
    between same-kind features the higher index is dropped. Returns retained
    column indices in order.
    """
    n = corr.shape[0]
    if feature_names is None:
        feature_names = FEATURE_NAMES if n == N_FEATURES else tuple(f"f{i}" for i in range(n))
    is_aps = [name.startswith("unique_aps") or name == "all_unique_aps" for name in feature_names]
    dropped: set[int] = set()
    for i in range(n):
        if i in dropped:
            continue
        for j in range(i + 1, n):
            if j in dropped:
                continue
            if abs(corr[i, j]) > threshold:
                if is_aps[i] and not is_aps[j]:
                    dropped.add(i)
                    break
                dropped.add(j)
    return [i for i in range(n) if i not in dropped]


# ---------------------------------------------------------------------------
# features.csv I/O


def write_features(path, series_list: Sequence[DaySeries], labels: dict | None = None,
                   header_comment: str | None = None):
    """Write one row per (user, day, slot) with feature columns and an
    optional label column. ``labels`` maps (user_id, day) to a label vector."""
    with open(path, "w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        cols = ["user_id", "day", "window_start", "interval", "minute_index"]
        cols += list(FEATURE_NAMES)
        if labels is not None:
            cols.append("label")
        fh.write(",".join(cols) + "\n")
        for s in sorted(series_list, key=lambda s: (s.user_id, s.day)):
            lab = labels.get((s.user_id, s.day)) if labels is not None else None
            ws = s.window_start.strftime("%Y-%m-%dT%H:%M:%SZ")
            for t in range(s.slots):
                row = [s.user_id, s.day, ws, str(s.interval), str(t)]
                row += [str(int(v)) for v in s.X[t]]
                if labels is not None:
                    row.append(str(int(lab[t])) if lab is not None else "")
                fh.write(",".join(row) + "\n")


def read_features(path) -> tuple[list[DaySeries], dict[tuple[str, str], np.ndarray]]:
    """Read features.csv back into series plus any label vectors present."""
    series_map: dict[tuple[str, str], DaySeries] = {}
    labels: dict[tuple[str, str], np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = None
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                has_label = header[-1] == "label"
                continue
            parts = line.split(",")
            user_id, day, ws, interval, t = parts[0], parts[1], parts[2], int(parts[3]), int(parts[4])
            key = (user_id, day)
            s = series_map.get(key)
            if s is None:
                slots = DAY_SECONDS // interval
                s = series_map[key] = DaySeries(
                    user_id=user_id,
                    day=day,
                    window_start=datetime.strptime(ws, "%Y-%m-%dT%H:%M:%SZ").replace(
                        tzinfo=timezone.utc
                    ),
                    interval=interval,
                    X=np.zeros((slots, N_FEATURES), np.int32),
                )
                if has_label:
                    labels[key] = np.zeros(slots, np.uint8)
            s.X[t] = [int(v) for v in parts[5 : 5 + N_FEATURES]]
            if has_label and parts[5 + N_FEATURES] != "":
                labels[key][t] = int(parts[5 + N_FEATURES])
    series = [series_map[k] for k in sorted(series_map)]
    return series, labels
