"""Parsing, filtering, and anonymization of WiFi association-event logs.

The canonical trace format is CSV with one report per line, columns:

    timestamp,packet_age,data_rate,device_type,channel,device_mac,
    association_status,rssi,noise_floor,bssid,mon_bssid

Timestamps are RFC 3339 UTC at second resolution (``2021-03-02T01:14:05Z``).
MAC addresses are six colon-separated lower-case hex octets. Malformed lines
raise :class:`ParseError` per line; stream helpers collect the errors and
keep going.
"""

from __future__ import annotations

import hashlib
import hmac
import re
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Iterable, Iterator

from .errors import DataError, EmptySalt, ParseError

CANONICAL_COLUMNS = (
    "timestamp",
    "packet_age",
    "data_rate",
    "device_type",
    "channel",
    "device_mac",
    "association_status",
    "rssi",
    "noise_floor",
    "bssid",
    "mon_bssid",
)

DEVICE_TYPES = ("client", "ap_station")
ASSOCIATION_STATUSES = ("associated", "unassociated")

# Device classes a registry may assign. The first four get their own feature
# columns; "shared" devices only contribute to the all-device aggregates.
DEVICE_CLASSES = (
    "smartphone_personal",
    "smartphone_study",
    "laptop",
    "tablet",
    "shared",
)

# Timestamps outside this range are treated as reporting-clock glitches
# (epoch resets and the like) by FilterPolicy.drop_invalid_timestamp.
TS_VALID_MIN = datetime(2000, 1, 1, tzinfo=timezone.utc)
TS_VALID_MAX = datetime(2100, 1, 1, tzinfo=timezone.utc)

_MAC_RE = re.compile(r"^([0-9a-fA-F]{2}[:-]){5}[0-9a-fA-F]{2}$")


@dataclass(frozen=True)
class RtlsRecord:
    """One access-point report of one device at one instant."""

    timestamp: datetime
    packet_age: int
    data_rate: float
    device_type: str
    channel: int
    device_mac: str
    association_status: str
    rssi: int
    noise_floor: int
    bssid: str
    mon_bssid: str


@dataclass(frozen=True)
class RegistryEntry:
    user_id: str
    device_class: str


@dataclass
class DeviceRegistry:
    """Mapping from device MAC to its owner and device class."""

    entries: dict[str, RegistryEntry]

    def user_of(self, mac: str) -> str | None:
        entry = self.entries.get(mac)
        return entry.user_id if entry else None

    def class_of(self, mac: str) -> str | None:
        entry = self.entries.get(mac)
        return entry.device_class if entry else None

    def users(self) -> list[str]:
        return sorted({e.user_id for e in self.entries.values()})

    def macs_of_user(self, user_id: str) -> list[str]:
        return sorted(m for m, e in self.entries.items() if e.user_id == user_id)

    def restricted(self, keep: "dict[str, set[str]]") -> "DeviceRegistry":
        """Registry keeping, per user, only devices whose class is in ``keep[user]``."""
        kept = {
            mac: e
            for mac, e in self.entries.items()
            if e.device_class in keep.get(e.user_id, set())
        }
        return DeviceRegistry(kept)


@dataclass(frozen=True)
class FilterPolicy:
    """Record-level cleaning policy.

    min_rssi drops spurious weak transmissions; require_associated keeps only
    devices with legitimate network access; drop_invalid_timestamp discards
    reports whose clock is outside the plausible range.
    """

    min_rssi: int = -85
    require_associated: bool = True
    drop_invalid_timestamp: bool = True

    def __post_init__(self):
        if self.min_rssi >= 0:
            raise DataError(f"min_rssi must be negative, got {self.min_rssi}")

    def keeps(self, rec: RtlsRecord) -> bool:
        if self.require_associated and rec.association_status != "associated":
            return False
        if rec.rssi < self.min_rssi:
            return False
        if self.drop_invalid_timestamp and not (
            TS_VALID_MIN <= rec.timestamp < TS_VALID_MAX
        ):
            return False
        return True


@dataclass
class IngestSummary:
    """Counts accumulated while streaming a trace file."""

    lines: int = 0
    parsed: int = 0
    kept: int = 0
    errors: list[ParseError] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.errors is None:
            self.errors = []


def parse_mac(s: str) -> str:
    """Normalize a MAC address to lower-case colon-separated form."""
    s = s.strip()
    if not _MAC_RE.match(s):
        raise ValueError(f"not a 6-octet MAC: {s!r}")
    return s.lower().replace("-", ":")


def parse_timestamp(s: str) -> datetime:
    """Parse an RFC 3339 timestamp and normalize it to UTC."""
    s = s.strip()
    try:
        dt = datetime.fromisoformat(s.replace("Z", "+00:00"))
    except ValueError as e:
        raise ValueError(str(e)) from None
    if dt.tzinfo is None:
        raise ValueError("timestamp lacks a UTC offset")
    return dt.astimezone(timezone.utc)


def format_timestamp(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _format_number(x: float) -> str:
    return str(int(x)) if float(x) == int(x) else repr(float(x))


def parse_rtls_line(line: str, line_no: int = 0) -> RtlsRecord:
    """Parse one canonical CSV line into an :class:`RtlsRecord`.

    Raises :class:`ParseError` naming the offending field; never touches
    the rest of the stream.
    """
    parts = [p.strip() for p in line.rstrip("\n").split(",")]
    if len(parts) != len(CANONICAL_COLUMNS):
        raise ParseError(
            line_no, "arity", f"expected {len(CANONICAL_COLUMNS)} fields, got {len(parts)}"
        )

    def fail(field: str, reason: str):
        raise ParseError(line_no, field, reason)

    try:
        ts = parse_timestamp(parts[0])
    except ValueError as e:
        fail("timestamp", str(e))
    try:
        packet_age = int(parts[1])
        if packet_age < 0:
            fail("packet_age", "must be non-negative")
    except ValueError:
        fail("packet_age", f"not an integer: {parts[1]!r}")
    try:
        data_rate = float(parts[2])
        if data_rate < 0:
            fail("data_rate", "must be non-negative")
    except ValueError:
        fail("data_rate", f"not numeric: {parts[2]!r}")
    if parts[3] not in DEVICE_TYPES:
        fail("device_type", f"unknown type {parts[3]!r}")
    try:
        channel = int(parts[4])
    except ValueError:
        fail("channel", f"not an integer: {parts[4]!r}")
    try:
        device_mac = parse_mac(parts[5])
    except ValueError as e:
        fail("device_mac", str(e))
    if parts[6] not in ASSOCIATION_STATUSES:
        fail("association_status", f"unknown status {parts[6]!r}")
    try:
        rssi = int(parts[7])
        if rssi > 0:
            fail("rssi", f"must be <= 0 dBm, got {rssi}")
    except ValueError:
        fail("rssi", f"not an integer: {parts[7]!r}")
    try:
        noise_floor = int(parts[8])
    except ValueError:
        fail("noise_floor", f"not an integer: {parts[8]!r}")
    try:
        bssid = parse_mac(parts[9])
    except ValueError as e:
        fail("bssid", str(e))
    try:
        mon_bssid = parse_mac(parts[10])
    except ValueError as e:
        fail("mon_bssid", str(e))

    return RtlsRecord(
        timestamp=ts,
        packet_age=packet_age,
        data_rate=data_rate,
        device_type=parts[3],
        channel=channel,
        device_mac=device_mac,
        association_status=parts[6],
        rssi=rssi,
        noise_floor=noise_floor,
        bssid=bssid,
        mon_bssid=mon_bssid,
    )


def format_rtls_line(rec: RtlsRecord) -> str:
    """Serialize a record to its canonical CSV line (inverse of parse)."""
    return ",".join(
        (
            format_timestamp(rec.timestamp),
            str(rec.packet_age),
            _format_number(rec.data_rate),
            rec.device_type,
            str(rec.channel),
            rec.device_mac,
            rec.association_status,
            str(rec.rssi),
            str(rec.noise_floor),
            rec.bssid,
            rec.mon_bssid,
        )
    )


def parse_rtls(
    lines: Iterable[str], summary: IngestSummary | None = None
) -> Iterator[RtlsRecord]:
    """Stream-parse canonical CSV lines, skipping malformed ones.

    Comment lines (``#``) and an optional header row are ignored. Parse
    failures are recorded on ``summary`` and never abort the stream.
    """
    first_content = True
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if first_content:
            first_content = False
            if stripped.lower().startswith("timestamp,"):
                continue
        if summary is not None:
            summary.lines += 1
        try:
            rec = parse_rtls_line(line, line_no)
        except ParseError as e:
            if summary is not None:
                summary.errors.append(e)
            continue
        if summary is not None:
            summary.parsed += 1
        yield rec


def filter_records(
    records: Iterable[RtlsRecord], policy: FilterPolicy
) -> Iterator[RtlsRecord]:
    """Keep exactly the records satisfying the policy, order preserved."""
    return (rec for rec in records if policy.keeps(rec))


def _pseudonym(mac: str, salt: bytes) -> str:
    digest = hmac.new(salt, mac.encode("ascii"), hashlib.sha256).digest()
    return ":".join(f"{b:02x}" for b in digest[:6])


def anonymize(
    records: Iterable[RtlsRecord], salt: bytes
) -> Iterator[RtlsRecord]:
    """Replace MAC identifiers with keyed-hash pseudonyms.

    The same (mac, salt) pair always maps to the same pseudonym; distinct
    salts give unrelated pseudonyms. Non-identifier fields pass through.
    """
    if not salt:
        raise EmptySalt("anonymization salt must be non-empty")
    cache: dict[str, str] = {}

    def pseud(mac: str) -> str:
        got = cache.get(mac)
        if got is None:
            got = cache[mac] = _pseudonym(mac, salt)
        return got

    for rec in records:
        yield replace(
            rec,
            device_mac=pseud(rec.device_mac),
            bssid=pseud(rec.bssid),
            mon_bssid=pseud(rec.mon_bssid),
        )


def anonymize_registry(registry: DeviceRegistry, salt: bytes) -> DeviceRegistry:
    """Apply the same pseudonym map to registry MACs so joins keep working."""
    if not salt:
        raise EmptySalt("anonymization salt must be non-empty")
    return DeviceRegistry(
        {_pseudonym(mac, salt): entry for mac, entry in registry.entries.items()}
    )


# ---------------------------------------------------------------------------
# File I/O


def write_records(path, records: Iterable[RtlsRecord], header_comment: str | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(",".join(CANONICAL_COLUMNS) + "\n")
        for rec in records:
            fh.write(format_rtls_line(rec) + "\n")


def read_records(path, summary: IngestSummary | None = None) -> list[RtlsRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return list(parse_rtls(fh, summary))


def write_registry(path, registry: DeviceRegistry, header_comment: str | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("mac,user_id,device_class\n")
        for mac in sorted(registry.entries):
            e = registry.entries[mac]
            fh.write(f"{mac},{e.user_id},{e.device_class}\n")


def read_registry(path) -> DeviceRegistry:
    entries: dict[str, RegistryEntry] = {}
    with open(path, "r", encoding="utf-8") as fh:
        first_content = True
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if first_content:
                first_content = False
                if stripped.lower().startswith("mac,"):
                    continue
            parts = [p.strip() for p in stripped.split(",")]
            if len(parts) != 3:
                raise ParseError(line_no, "arity", "registry rows need mac,user_id,device_class")
            try:
                mac = parse_mac(parts[0])
            except ValueError as e:
                raise ParseError(line_no, "mac", str(e))
            if not parts[1]:
                raise ParseError(line_no, "user_id", "must be non-empty")
            if parts[2] not in DEVICE_CLASSES:
                raise ParseError(line_no, "device_class", f"unknown class {parts[2]!r}")
            if mac in entries:
                raise ParseError(line_no, "mac", f"duplicate mac {mac}")
            entries[mac] = RegistryEntry(user_id=parts[1], device_class=parts[2])
    return DeviceRegistry(entries)
