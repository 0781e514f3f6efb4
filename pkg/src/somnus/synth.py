"""Synthetic cohort generator: sleep schedules plus device event streams.

Each user gets a nightly schedule drawn from their profile and a set of
devices whose per-minute event counts follow inhomogeneous Poisson rates:
a high rate on the actively-used device, a small idle-noise rate otherwise
(updates and notifications that keep arriving while the user sleeps), and
nothing from phones while the user is away from home. Counts are drawn by
inverting the Poisson CDF on a fixed uniform stream, so raising a noise
rate can only raise the resulting counts (coupled-seed monotonicity) and
every output is a pure function of the master seed.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta, timezone
from typing import Iterator, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .errors import InvalidSpec, ParseError
from .records import DeviceRegistry, RegistryEntry, RtlsRecord

PHONE_CLASSES = ("smartphone_personal", "smartphone_study")
WINDOW_MINUTES = 1440
REPORT_TICKS = 12  # five-second reporting grid within a minute
RAMP_MINUTES = 30
_EVENT_CAP = 36  # per-device-minute ceiling on generated reports


@dataclass
class SleepProfile:
    """Nightly schedule model for one user."""

    archetype: str = "regular"  # regular | night_owl | irregular
    mean_bedtime: str = "01:45"  # local clock HH:MM
    bedtime_stddev: float = 35.0  # minutes
    mean_duration: float = 400.0  # minutes
    duration_stddev: float = 40.0
    disruption_prob: float = 0.0
    # Fixed disruption shift in minutes; None draws uniformly from
    # +/-[120, 240] to model occasional large schedule shifts.
    disruption_shift: float | None = None
    away_prob: float = 0.0  # chance of one daytime absence block
    away_minutes: tuple[float, float] = (60.0, 180.0)

    def __post_init__(self):
        if self.archetype not in ("regular", "night_owl", "irregular"):
            raise InvalidSpec(f"unknown archetype {self.archetype!r}")
        if self.bedtime_stddev < 0 or self.duration_stddev < 0:
            raise InvalidSpec("stddevs must be >= 0")
        if not 0 <= self.disruption_prob <= 1:
            raise InvalidSpec("disruption_prob must be in [0, 1]")
        if not 180 <= self.mean_duration <= 720:
            raise InvalidSpec(
                f"mean_duration must be in [180, 720], got {self.mean_duration}"
            )
        if not 0 <= self.away_prob <= 1:
            raise InvalidSpec("away_prob must be in [0, 1]")

    def bedtime_offset_minutes(self) -> float:
        h, m = self.mean_bedtime.split(":")
        return ((int(h) - 18) % 24) * 60 + int(m)


_FLAT_USAGE = tuple([0.25] * 24)


@dataclass
class DeviceBehavior:
    """Event-rate model for one device.

    Rates are radio wake-up arrivals per minute; each arrival produces a
    short burst of AP reports (one per five-second tick the radio stays
    active). Awake wake-ups hold the radio up for several ticks, overnight
    notification pings for one or two, so awake minutes show visibly larger
    counts. While the user is awake at home an unused device still syncs at
    ``awake_background_rate``; overnight (and for devices left home alone)
    only the sparse ``idle_noise_rate`` remains.
    """

    device_class: str
    awake_event_rate: float = 2.0  # wake-ups/minute while actively used
    idle_noise_rate: float = 0.08  # wake-ups/minute while user asleep or device alone
    awake_background_rate: float = 0.2  # periodic app syncs/minute while user awake, device idle
    awake_burst_extra: float = 2.2  # mean extra reports per awake wake-up
    idle_burst_extra: float = 0.4  # mean extra reports per idle wake-up
    update_storm_prob: float = 0.0  # chance/night of an overnight update burst
    ap_switch_prob: float = 0.15  # chance a report names a neighboring AP
    usage_windows: tuple[float, ...] = _FLAT_USAGE  # hourly active propensity
    ap_pool: tuple[str, ...] = ()
    data_rate: float = 54
    channel: int = 6

    def __post_init__(self):
        rates = (
            self.awake_event_rate,
            self.idle_noise_rate,
            self.awake_background_rate,
            self.awake_burst_extra,
            self.idle_burst_extra,
        )
        if min(rates) < 0:
            raise InvalidSpec("device event rates must be >= 0")
        if not 0 <= self.update_storm_prob <= 1:
            raise InvalidSpec("update_storm_prob must be in [0, 1]")
        if not 0 <= self.ap_switch_prob <= 1:
            raise InvalidSpec("ap_switch_prob must be in [0, 1]")
        if len(self.usage_windows) != 24:
            raise InvalidSpec("usage_windows needs 24 hourly propensities")
        if any(p < 0 for p in self.usage_windows):
            raise InvalidSpec("usage propensities must be >= 0")


@dataclass(frozen=True)
class GroundTruthDay:
    user_id: str
    day: str  # ISO date of the window's local 18:00 anchor
    sleep_start: datetime
    sleep_end: datetime

    def __post_init__(self):
        if self.sleep_start >= self.sleep_end:
            raise InvalidSpec("sleep_start must precede sleep_end")


@dataclass
class UserSpec:
    user_id: str
    profile: SleepProfile
    devices: list[DeviceBehavior]
    device_macs: list[str] = field(default_factory=list)

    def __post_init__(self):
        personal = [d for d in self.devices if d.device_class != "shared"]
        if not 1 <= len(personal) <= 4:
            raise InvalidSpec(
                f"user {self.user_id} needs 1-4 personal devices, has {len(personal)}"
            )
        for hour in range(24):
            total = sum(d.usage_windows[hour] for d in self.devices)
            if total > 1.0 + 1e-9:
                raise InvalidSpec(
                    f"user {self.user_id}: device usage propensities sum to "
                    f"{total:.3f} > 1 at hour {hour}"
                )


@dataclass
class CohortSpec:
    users: list[UserSpec]
    days: int = 7
    timezone: str = "UTC"
    start_date: date = date(2021, 3, 1)
    unassociated_prob: float = 0.01  # probe-request noise records
    weak_rssi_prob: float = 0.01  # spurious weak transmissions
    ping_pong: bool = False  # alternate APs within active bursts

    def __post_init__(self):
        if not self.users:
            raise InvalidSpec("cohort needs at least one user")
        if self.days < 1:
            raise InvalidSpec("cohort needs at least one day")
        if isinstance(self.start_date, str):
            self.start_date = date.fromisoformat(self.start_date)
        seen = set()
        for u in self.users:
            if u.user_id in seen:
                raise InvalidSpec(f"duplicate user_id {u.user_id}")
            seen.add(u.user_id)


def _poisson_icdf(u: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Inverse Poisson CDF, monotone in lam for a fixed uniform draw."""
    lam = np.asarray(lam, dtype=np.float64)
    out = np.zeros(lam.shape, np.int64)
    p = np.exp(-lam)
    cum = p.copy()
    remaining = u >= cum
    k = 0
    while remaining.any() and k < _EVENT_CAP:
        k += 1
        p = p * lam / k
        cum = cum + p
        out[remaining] = k
        remaining = remaining & (u >= cum)
    return out


def _assign_macs(spec: CohortSpec) -> None:
    for ui, user in enumerate(spec.users):
        if not user.device_macs:
            user.device_macs = [
                f"aa:bb:{(ui >> 8) & 0xFF:02x}:{ui & 0xFF:02x}:00:{di:02x}"
                for di in range(len(user.devices))
            ]
        elif len(user.device_macs) != len(user.devices):
            raise InvalidSpec(f"user {user.user_id}: device_macs/devices mismatch")


def _default_ap_pool(user_index: int) -> tuple[str, ...]:
    return tuple(
        f"10:20:{(user_index >> 8) & 0xFF:02x}:{user_index & 0xFF:02x}:00:0{k}"
        for k in range(1, 4)
    )


def build_registry(spec: CohortSpec) -> DeviceRegistry:
    _assign_macs(spec)
    entries = {}
    for user in spec.users:
        for mac, dev in zip(user.device_macs, user.devices):
            entries[mac] = RegistryEntry(user_id=user.user_id, device_class=dev.device_class)
    return DeviceRegistry(entries)


def _window_start_utc(spec: CohortSpec, day_index: int) -> datetime:
    zone = ZoneInfo(spec.timezone)
    anchor = spec.start_date + timedelta(days=day_index)
    return datetime.combine(anchor, time(18), tzinfo=zone).astimezone(timezone.utc)


@dataclass
class _Schedule:
    sleep_start_min: int
    sleep_end_min: int
    away_start_min: int  # -1 when no absence block
    away_end_min: int


def _draw_schedule(profile: SleepProfile, rng: np.random.Generator) -> _Schedule:
    bedtime = profile.bedtime_offset_minutes() + rng.normal(0.0, profile.bedtime_stddev)
    if rng.random() < profile.disruption_prob:
        if profile.disruption_shift is not None:
            bedtime += profile.disruption_shift
        else:
            bedtime += rng.uniform(120.0, 240.0) * rng.choice((-1.0, 1.0))
    duration = np.clip(
        rng.normal(profile.mean_duration, profile.duration_stddev), 180.0, 720.0
    )
    start = int(np.clip(round(bedtime), RAMP_MINUTES + 1, WINDOW_MINUTES - 60))
    end = int(np.clip(round(bedtime + duration), start + 30, WINDOW_MINUTES - 1))

    away_start = away_end = -1
    if rng.random() < profile.away_prob:
        lo = end + RAMP_MINUTES + 30
        hi = WINDOW_MINUTES - 90
        if hi > lo:
            away_start = int(rng.integers(lo, hi))
            length = int(rng.uniform(*profile.away_minutes))
            away_end = min(away_start + length, WINDOW_MINUTES - 60)
    return _Schedule(start, end, away_start, away_end)


def _minute_rates(
    user: UserSpec, sched: _Schedule, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-device per-minute arrival rates and the active-device choice.

    Returns (rates (D, 1440), active (1440,), awake_home (1440,)) where
    active == D means no device is in active use that minute.
    """
    devices = user.devices
    D = len(devices)
    minutes = np.arange(WINDOW_MINUTES)
    hours = (18 + minutes // 60) % 24

    asleep = (minutes >= sched.sleep_start_min) & (minutes < sched.sleep_end_min)
    away = np.zeros(WINDOW_MINUTES, bool)
    if sched.away_start_min >= 0:
        away = (minutes >= sched.away_start_min) & (minutes < sched.away_end_min)
    ramp_pre = (minutes >= sched.sleep_start_min - RAMP_MINUTES) & (
        minutes < sched.sleep_start_min
    )
    ramp_post = (minutes >= sched.sleep_end_min) & (
        minutes < sched.sleep_end_min + RAMP_MINUTES
    )

    props = np.zeros((D, WINDOW_MINUTES))
    for di, dev in enumerate(devices):
        props[di] = np.asarray(dev.usage_windows)[hours]

    def _class_index(classes, fallback=0):
        for di, dev in enumerate(devices):
            if dev.device_class in classes:
                return di
        return fallback

    bed_dev = _class_index(("tablet",), _class_index(PHONE_CLASSES))
    wake_dev = _class_index(PHONE_CLASSES)
    for mask, dev_idx in ((ramp_pre, bed_dev), (ramp_post, wake_dev)):
        props[:, mask] = 0.03
        props[dev_idx, mask] = 0.85

    props[:, asleep] = 0.0
    props[:, away] = 0.0

    r = rng.random(WINDOW_MINUTES)
    cum = np.cumsum(props, axis=0)
    below = r < cum
    active = np.where(below.any(axis=0), below.argmax(axis=0), D)

    awake_home = ~asleep & ~away
    rates = np.empty((D, WINDOW_MINUTES))
    for di, dev in enumerate(devices):
        rates[di] = dev.idle_noise_rate
        rates[di, awake_home] = dev.awake_background_rate
        rates[di, active == di] = dev.awake_event_rate
        if dev.device_class in PHONE_CLASSES:
            rates[di, away] = 0.0  # phones travel with the user
    return rates, active, awake_home


def _device_counts(
    dev: DeviceBehavior,
    rate: np.ndarray,
    sched: _Schedule,
    awake_home: np.ndarray,
    is_active: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-minute report counts for one device: (counts, storm mask).

    Idle arrivals come from the inverse Poisson CDF on a fixed uniform
    stream, so raising idle_noise_rate can only raise in-sleep counts.
    Background syncs while awake fire on a jittered per-day period;
    overnight update storms add a contiguous high-rate stretch.
    """
    # fixed draw order per device: storm, sync period/phase, arrivals, bursts
    storm_u = rng.random()
    storm_len = int(rng.uniform(8, 21))
    storm_off = rng.random()
    period_jitter = rng.uniform(0.75, 1.25)
    phase_u = rng.random()

    minutes = np.arange(WINDOW_MINUTES)
    rate = rate.copy()
    storm_mask = np.zeros(WINDOW_MINUTES, bool)
    sleep_len = sched.sleep_end_min - sched.sleep_start_min
    if storm_u < dev.update_storm_prob and sleep_len > storm_len + 2:
        s0 = sched.sleep_start_min + 1 + int(storm_off * (sleep_len - storm_len - 2))
        storm_mask = (minutes >= s0) & (minutes < s0 + storm_len)
        rate[storm_mask] += 1.2

    u_arrival = rng.random(WINDOW_MINUTES)
    u_burst = rng.random(WINDOW_MINUTES)
    arrivals = _poisson_icdf(u_arrival, rate)

    if dev.awake_background_rate > 0:
        period = np.clip(1.0 / dev.awake_background_rate, 1.5, 90.0) * period_jitter
        phase = phase_u * period
        sync = (np.floor((minutes + phase) / period)
                != np.floor((minutes + 1 + phase) / period))
        arrivals = arrivals + (sync & awake_home & ~is_active)

    burst_mean = np.where(awake_home | storm_mask, dev.awake_burst_extra,
                          dev.idle_burst_extra)
    burst = 1 + _poisson_icdf(u_burst, burst_mean)
    return np.minimum(arrivals * burst, 5 * REPORT_TICKS), storm_mask


def gen_user_day(
    user: UserSpec,
    day_index: int,
    window_start: datetime,
    schedule_rng: np.random.Generator,
    event_rng: np.random.Generator,
    spec: CohortSpec,
    user_index: int = 0,
    master_seed: int = 0,
) -> tuple[GroundTruthDay, list[RtlsRecord]]:
    """One user-day: ground truth plus that day's records, time-sorted."""
    sched = _draw_schedule(user.profile, schedule_rng)
    day_iso = (spec.start_date + timedelta(days=day_index)).isoformat()
    truth = GroundTruthDay(
        user_id=user.user_id,
        day=day_iso,
        sleep_start=window_start + timedelta(minutes=sched.sleep_start_min),
        sleep_end=window_start + timedelta(minutes=sched.sleep_end_min),
    )

    rates, active, awake_home = _minute_rates(user, sched, event_rng)
    records: list[RtlsRecord] = []
    for di, dev in enumerate(user.devices):
        # independent substream per device so one device's rate change never
        # perturbs another's draws (keeps coupled-seed comparisons valid)
        rng = np.random.default_rng(
            np.random.SeedSequence([int(master_seed), 2, user_index, day_index, di])
        )
        pool = dev.ap_pool or _default_ap_pool(0)
        is_active = active == di
        counts, _ = _device_counts(dev, rates[di], sched, awake_home, is_active, rng)
        total = int(counts.sum())
        if total == 0:
            continue
        ev_minutes = np.repeat(np.arange(WINDOW_MINUTES), counts)
        ticks = rng.integers(0, REPORT_TICKS, total)
        ap_other = rng.random(total) < dev.ap_switch_prob
        ap_pick = rng.integers(1, max(len(pool), 2), total)
        ev_active = is_active[ev_minutes]
        rssi = np.clip(
            np.round(rng.normal(np.where(ev_active, -56.0, -68.0), 6.0)),
            -92,
            -31,
        ).astype(int)
        weak = rng.random(total) < spec.weak_rssi_prob
        rssi[weak] = rng.integers(-95, -87, int(weak.sum()))
        unassoc = rng.random(total) < spec.unassociated_prob
        aged = rng.random(total) < 0.05
        mac = user.device_macs[di]
        for e in range(total):
            if spec.ping_pong and ev_active[e] and len(pool) > 1:
                bssid = pool[int(ticks[e]) % 2]
            elif ap_other[e] and len(pool) > 1:
                bssid = pool[int(ap_pick[e]) % len(pool)]
            else:
                bssid = pool[0]
            ts = window_start + timedelta(
                seconds=int(ev_minutes[e]) * 60 + int(ticks[e]) * 5
            )
            records.append(
                RtlsRecord(
                    timestamp=ts,
                    packet_age=1 if aged[e] else 0,
                    data_rate=dev.data_rate,
                    device_type="client",
                    channel=dev.channel,
                    device_mac=mac,
                    association_status="unassociated" if unassoc[e] else "associated",
                    rssi=int(rssi[e]),
                    noise_floor=-92,
                    bssid=bssid,
                    mon_bssid=bssid,
                )
            )
    records.sort(key=lambda r: (r.timestamp, r.device_mac, r.bssid, r.rssi))
    return truth, records


def _user_day_rngs(seed: int, user_index: int, day_index: int):
    schedule = np.random.default_rng(
        np.random.SeedSequence([int(seed), 0, user_index, day_index])
    )
    events = np.random.default_rng(
        np.random.SeedSequence([int(seed), 1, user_index, day_index])
    )
    return schedule, events


def gen_truths(spec: CohortSpec, seed: int) -> list[GroundTruthDay]:
    """Schedule-only pass; identical draws to the full generation."""
    truths = []
    for di in range(spec.days):
        window_start = _window_start_utc(spec, di)
        for ui, user in enumerate(spec.users):
            rng, _ = _user_day_rngs(seed, ui, di)
            sched = _draw_schedule(user.profile, rng)
            truths.append(
                GroundTruthDay(
                    user_id=user.user_id,
                    day=(spec.start_date + timedelta(days=di)).isoformat(),
                    sleep_start=window_start + timedelta(minutes=sched.sleep_start_min),
                    sleep_end=window_start + timedelta(minutes=sched.sleep_end_min),
                )
            )
    return truths


def gen_records(spec: CohortSpec, seed: int) -> Iterator[RtlsRecord]:
    """Lazily generate the cohort's record stream in global time order."""
    for di in range(spec.days):
        window_start = _window_start_utc(spec, di)
        per_user = []
        for ui, user in enumerate(spec.users):
            srng, erng = _user_day_rngs(seed, ui, di)
            _, recs = gen_user_day(
                user, di, window_start, srng, erng, spec,
                user_index=ui, master_seed=seed,
            )
            per_user.append(recs)
        yield from heapq.merge(
            *per_user, key=lambda r: (r.timestamp, r.device_mac, r.bssid, r.rssi)
        )


def gen_cohort(
    spec: CohortSpec, seed: int
) -> tuple[DeviceRegistry, list[GroundTruthDay], Iterator[RtlsRecord]]:
    """Deterministic cohort: registry, ground truth, and the record stream."""
    registry = build_registry(spec)
    truths = gen_truths(spec, seed)
    return registry, truths, gen_records(spec, seed)


# ---------------------------------------------------------------------------
# Ground-truth CSV


def write_truth(path, truths: Sequence[GroundTruthDay], header_comment: str | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("user_id,day,sleep_start,sleep_end\n")
        for t in sorted(truths, key=lambda t: (t.user_id, t.day)):
            fh.write(
                f"{t.user_id},{t.day},"
                f"{t.sleep_start.strftime('%Y-%m-%dT%H:%M:%SZ')},"
                f"{t.sleep_end.strftime('%Y-%m-%dT%H:%M:%SZ')}\n"
            )


def read_truth(path) -> list[GroundTruthDay]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("user_id,"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError(line_no, "arity", "truth rows need 4 columns")
            out.append(
                GroundTruthDay(
                    user_id=parts[0],
                    day=parts[1],
                    sleep_start=datetime.strptime(parts[2], "%Y-%m-%dT%H:%M:%SZ").replace(
                        tzinfo=timezone.utc
                    ),
                    sleep_end=datetime.strptime(parts[3], "%Y-%m-%dT%H:%M:%SZ").replace(
                        tzinfo=timezone.utc
                    ),
                )
            )
    return out


def truth_index(truths: Sequence[GroundTruthDay]) -> dict[tuple[str, str], GroundTruthDay]:
    return {(t.user_id, t.day): t for t in truths}


# ---------------------------------------------------------------------------
# Cohort presets and spec files

_USAGE = {
    # hourly propensity of being the actively used device, hours 0..23 local
    "smartphone_personal": (
        0.42, 0.40, 0.38, 0.35, 0.35, 0.35, 0.50, 0.50, 0.48, 0.40, 0.35, 0.35,
        0.35, 0.35, 0.35, 0.35, 0.35, 0.38, 0.42, 0.42, 0.40, 0.40, 0.42, 0.42,
    ),
    "smartphone_study": (
        0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.08, 0.10, 0.10, 0.10, 0.10, 0.10,
        0.10, 0.10, 0.10, 0.10, 0.10, 0.10, 0.10, 0.10, 0.08, 0.08, 0.05, 0.05,
    ),
    "laptop": (
        0.10, 0.08, 0.05, 0.05, 0.05, 0.05, 0.10, 0.15, 0.25, 0.35, 0.35, 0.35,
        0.35, 0.35, 0.35, 0.35, 0.35, 0.30, 0.30, 0.28, 0.25, 0.20, 0.15, 0.12,
    ),
    "tablet": (
        0.30, 0.28, 0.20, 0.15, 0.10, 0.05, 0.05, 0.08, 0.08, 0.05, 0.05, 0.05,
        0.05, 0.05, 0.05, 0.05, 0.05, 0.08, 0.10, 0.15, 0.20, 0.28, 0.30, 0.30,
    ),
    "shared": (
        0.02, 0.02, 0.02, 0.02, 0.02, 0.02, 0.02, 0.05, 0.05, 0.02, 0.02, 0.02,
        0.02, 0.02, 0.02, 0.02, 0.02, 0.05, 0.12, 0.15, 0.15, 0.12, 0.05, 0.02,
    ),
}

_RATES = {
    # (awake_event_rate, awake_background_rate, idle_noise_rate) per class:
    # active wake-ups/min, background syncs/min, overnight pings/min
    "smartphone_personal": (2.0, 0.22, 0.08),
    "smartphone_study": (1.5, 0.12, 0.05),
    "laptop": (2.2, 0.18, 0.03),
    "tablet": (2.0, 0.10, 0.02),
    "shared": (1.5, 0.08, 0.04),
}

_STORM_PROB = {
    # roughly weekly-to-biweekly overnight update bursts per device
    "smartphone_personal": 0.03,
    "smartphone_study": 0.02,
    "laptop": 0.03,
    "tablet": 0.015,
    "shared": 0.01,
}

_DEVICE_MIXES = (
    ("smartphone_personal", "laptop", "tablet"),
    ("smartphone_personal", "laptop"),
    ("smartphone_personal", "smartphone_study", "laptop", "tablet"),
    ("smartphone_personal", "tablet"),
    ("smartphone_personal", "laptop", "tablet", "shared"),
    ("smartphone_personal", "smartphone_study", "laptop"),
)


def _scaled_usage(classes: Sequence[str]) -> list[tuple[float, ...]]:
    """Per-hour propensities for a device mix, rescaled so no hour tops 0.95."""
    rows = [list(_USAGE[c]) for c in classes]
    for hour in range(24):
        total = sum(r[hour] for r in rows)
        if total > 0.95:
            scale = 0.95 / total
            for r in rows:
                r[hour] *= scale
    return [tuple(r) for r in rows]


def _preset_user(index: int, noise_scale: float, away_prob: float,
                 disruption_prob: float) -> UserSpec:
    archetypes = ("regular", "regular", "night_owl", "regular", "irregular", "regular")
    archetype = archetypes[index % len(archetypes)]
    if archetype == "regular":
        bed_min = 45 + 17 * (index % 7)  # spread bedtimes from 00:45 to 02:27
        profile = SleepProfile(
            archetype="regular",
            mean_bedtime=f"{(bed_min // 60) % 24:02d}:{bed_min % 60:02d}",
            bedtime_stddev=30.0,
            mean_duration=390.0 + 10 * (index % 5),
            duration_stddev=35.0,
            disruption_prob=disruption_prob,
            away_prob=away_prob,
        )
    elif archetype == "night_owl":
        profile = SleepProfile(
            archetype="night_owl",
            mean_bedtime="04:00",
            bedtime_stddev=40.0,
            mean_duration=360.0,
            duration_stddev=40.0,
            disruption_prob=disruption_prob,
            away_prob=away_prob,
        )
    else:
        profile = SleepProfile(
            archetype="irregular",
            mean_bedtime="02:15",
            bedtime_stddev=80.0,
            mean_duration=380.0,
            duration_stddev=55.0,
            disruption_prob=max(disruption_prob, 0.15),
            away_prob=away_prob,
        )
    classes = _DEVICE_MIXES[index % len(_DEVICE_MIXES)]
    usages = _scaled_usage(classes)
    # per-user habits differ where it matters for the classifier's decision
    # boundary: notification volume and burst sizes overnight, background
    # sync chattiness while awake, and AP stability all vary user to user,
    # which is what the personal training share has to learn
    rate_mult = 0.70 + 0.15 * (index % 5)
    idle_mult = 0.50 + 0.35 * ((index * 3 + 1) % 5)
    bg_mult = 0.45 + 0.35 * ((index * 5 + 2) % 4)
    burst_mult = 0.70 + 0.30 * ((index * 7 + 2) % 4)
    ap_switch = 0.05 + 0.08 * (index % 4)
    devices = []
    for ci, cls in enumerate(classes):
        awake, background, idle = _RATES[cls]
        devices.append(
            DeviceBehavior(
                device_class=cls,
                awake_event_rate=awake * rate_mult,
                idle_noise_rate=idle * idle_mult * noise_scale,
                awake_background_rate=background * bg_mult,
                awake_burst_extra=2.2 * burst_mult,
                idle_burst_extra=0.4 * burst_mult * max(noise_scale, 0.25),
                update_storm_prob=_STORM_PROB[cls] * noise_scale,
                ap_switch_prob=ap_switch,
                usage_windows=usages[ci],
                ap_pool=_default_ap_pool(index),
                data_rate=54 if cls.startswith("smartphone") else 866,
                channel=6 + (index % 3) * 5,
            )
        )
    return UserSpec(user_id=f"u{index:02d}", profile=profile, devices=devices)


def preset_cohort(name: str, n_users: int | None = None, days: int | None = None,
                  timezone_name: str = "UTC") -> CohortSpec:
    """Built-in cohorts. ``acceptance`` is the 20x14 moderate-noise cohort,
    ``standard`` the smaller mixed cohort used for directional comparisons,
    ``clean`` a low-noise cohort, ``tiny`` a smoke-test cohort."""
    presets = {
        "acceptance": dict(n_users=20, days=14, noise=1.0, away=0.45, disrupt=0.05),
        "standard": dict(n_users=6, days=12, noise=1.0, away=0.4, disrupt=0.05),
        "clean": dict(n_users=8, days=12, noise=0.1, away=0.0, disrupt=0.0),
        "tiny": dict(n_users=2, days=3, noise=1.0, away=0.3, disrupt=0.0),
    }
    if name not in presets:
        raise InvalidSpec(f"unknown preset {name!r} (have {sorted(presets)})")
    p = presets[name]
    users = [
        _preset_user(i, p["noise"], p["away"], p["disrupt"])
        for i in range(n_users or p["n_users"])
    ]
    return CohortSpec(
        users=users,
        days=days or p["days"],
        timezone=timezone_name,
    )


# ---------------------------------------------------------------------------
# Spec file (YAML) I/O


def cohort_spec_to_dict(spec: CohortSpec) -> dict:
    return {
        "timezone": spec.timezone,
        "start_date": spec.start_date.isoformat(),
        "days": spec.days,
        "unassociated_prob": spec.unassociated_prob,
        "weak_rssi_prob": spec.weak_rssi_prob,
        "ping_pong": spec.ping_pong,
        "users": [
            {
                "user_id": u.user_id,
                "profile": {
                    "archetype": u.profile.archetype,
                    "mean_bedtime": u.profile.mean_bedtime,
                    "bedtime_stddev": u.profile.bedtime_stddev,
                    "mean_duration": u.profile.mean_duration,
                    "duration_stddev": u.profile.duration_stddev,
                    "disruption_prob": u.profile.disruption_prob,
                    "disruption_shift": u.profile.disruption_shift,
                    "away_prob": u.profile.away_prob,
                    "away_minutes": list(u.profile.away_minutes),
                },
                "device_macs": list(u.device_macs),
                "devices": [
                    {
                        "device_class": d.device_class,
                        "awake_event_rate": d.awake_event_rate,
                        "idle_noise_rate": d.idle_noise_rate,
                        "awake_background_rate": d.awake_background_rate,
                        "awake_burst_extra": d.awake_burst_extra,
                        "idle_burst_extra": d.idle_burst_extra,
                        "update_storm_prob": d.update_storm_prob,
                        "ap_switch_prob": d.ap_switch_prob,
                        "usage_windows": list(d.usage_windows),
                        "ap_pool": list(d.ap_pool),
                        "data_rate": d.data_rate,
                        "channel": d.channel,
                    }
                    for d in u.devices
                ],
            }
            for u in spec.users
        ],
    }


def cohort_spec_from_dict(data: dict) -> CohortSpec:
    try:
        users = []
        for ud in data["users"]:
            pd = dict(ud.get("profile", {}))
            if "away_minutes" in pd:
                pd["away_minutes"] = tuple(pd["away_minutes"])
            profile = SleepProfile(**pd)
            devices = []
            for dd in ud["devices"]:
                dd = dict(dd)
                dd["usage_windows"] = tuple(dd.get("usage_windows", _FLAT_USAGE))
                dd["ap_pool"] = tuple(dd.get("ap_pool", ()))
                devices.append(DeviceBehavior(**dd))
            users.append(
                UserSpec(
                    user_id=ud["user_id"],
                    profile=profile,
                    devices=devices,
                    device_macs=list(ud.get("device_macs", [])),
                )
            )
        return CohortSpec(
            users=users,
            days=int(data.get("days", 7)),
            timezone=data.get("timezone", "UTC"),
            start_date=data.get("start_date", "2021-03-01"),
            unassociated_prob=float(data.get("unassociated_prob", 0.01)),
            weak_rssi_prob=float(data.get("weak_rssi_prob", 0.01)),
            ping_pong=bool(data.get("ping_pong", False)),
        )
    except (KeyError, TypeError) as e:
        raise InvalidSpec(f"malformed cohort spec: {e}") from None


def load_cohort_spec(path) -> CohortSpec:
    import yaml

    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise InvalidSpec(f"cohort spec {path} is not a mapping")
    return cohort_spec_from_dict(data)
