from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somnus.errors import EmptySalt, ParseError
from somnus.records import (
    DeviceRegistry,
    FilterPolicy,
    IngestSummary,
    RegistryEntry,
    RtlsRecord,
    anonymize,
    anonymize_registry,
    filter_records,
    format_rtls_line,
    parse_rtls,
    parse_rtls_line,
    read_records,
    read_registry,
    write_records,
    write_registry,
)

GOOD_LINE = (
    "2021-03-02T01:14:05Z,0,54,client,6,aa:bb:cc:dd:ee:01,associated,"
    "-61,-92,10:20:30:40:50:60,10:20:30:40:50:60"
)


def make_record(**kw) -> RtlsRecord:
    base = dict(
        timestamp=datetime(2021, 3, 2, 1, 14, 5, tzinfo=timezone.utc),
        packet_age=0,
        data_rate=54.0,
        device_type="client",
        channel=6,
        device_mac="aa:bb:cc:dd:ee:01",
        association_status="associated",
        rssi=-61,
        noise_floor=-92,
        bssid="10:20:30:40:50:60",
        mon_bssid="10:20:30:40:50:60",
    )
    base.update(kw)
    return RtlsRecord(**base)


def random_record(rng) -> RtlsRecord:
    def mac():
        return ":".join(f"{b:02x}" for b in rng.integers(0, 256, 6))

    return make_record(
        timestamp=datetime.fromtimestamp(
            int(rng.integers(1_500_000_000, 1_800_000_000)), tz=timezone.utc
        ),
        packet_age=int(rng.integers(0, 5)),
        data_rate=float(rng.choice([6, 54, 144.4, 866.7])),
        device_type=str(rng.choice(["client", "ap_station"])),
        channel=int(rng.choice([1, 6, 11, 36, 149])),
        device_mac=mac(),
        association_status=str(rng.choice(["associated", "unassociated"])),
        rssi=int(rng.integers(-95, 0)),
        noise_floor=int(rng.integers(-100, -80)),
        bssid=mac(),
        mon_bssid=mac(),
    )


class TestParse:
    def test_canonical_line(self):
        rec = parse_rtls_line(GOOD_LINE)
        assert rec.rssi == -61
        assert rec.association_status == "associated"
        assert rec.device_type == "client"
        assert rec.device_mac == "aa:bb:cc:dd:ee:01"
        assert rec.timestamp == datetime(2021, 3, 2, 1, 14, 5, tzinfo=timezone.utc)

    def test_bad_status_names_field(self):
        line = GOOD_LINE.replace("associated,-61", "assoc?,-61")
        with pytest.raises(ParseError) as exc:
            parse_rtls_line(line, line_no=7)
        assert exc.value.field == "association_status"
        assert exc.value.line_no == 7

    def test_wrong_arity(self):
        with pytest.raises(ParseError) as exc:
            parse_rtls_line("a,b,c")
        assert exc.value.field == "arity"

    def test_bad_mac(self):
        line = GOOD_LINE.replace("aa:bb:cc:dd:ee:01", "aa:bb:cc:dd:ee")
        with pytest.raises(ParseError) as exc:
            parse_rtls_line(line)
        assert exc.value.field == "device_mac"

    def test_positive_rssi_rejected(self):
        line = GOOD_LINE.replace(",-61,", ",17,")
        with pytest.raises(ParseError) as exc:
            parse_rtls_line(line)
        assert exc.value.field == "rssi"

    def test_bad_timestamp(self):
        line = "not-a-time" + GOOD_LINE[20:]
        with pytest.raises(ParseError) as exc:
            parse_rtls_line(line)
        assert exc.value.field == "timestamp"

    def test_uppercase_mac_normalized(self):
        line = GOOD_LINE.replace("aa:bb:cc:dd:ee:01", "AA:BB:CC:DD:EE:01")
        assert parse_rtls_line(line).device_mac == "aa:bb:cc:dd:ee:01"

    def test_round_trip_1000_randomized(self, rng):
        for _ in range(1000):
            rec = random_record(rng)
            line = format_rtls_line(rec)
            assert parse_rtls_line(line) == rec
            assert format_rtls_line(parse_rtls_line(line)) == line

    @given(
        rssi=st.integers(min_value=-100, max_value=0),
        channel=st.integers(min_value=1, max_value=196),
        age=st.integers(min_value=0, max_value=10),
        rate=st.sampled_from([6.0, 54.0, 144.4, 866.7, 1201.0]),
        octets=st.lists(st.integers(0, 255), min_size=6, max_size=6),
        ts=st.integers(min_value=0, max_value=2**31 - 1),
    )
    @settings(max_examples=200)
    def test_round_trip_property(self, rssi, channel, age, rate, octets, ts):
        mac = ":".join(f"{b:02x}" for b in octets)
        rec = make_record(
            timestamp=datetime.fromtimestamp(ts, tz=timezone.utc),
            rssi=rssi,
            channel=channel,
            packet_age=age,
            data_rate=rate,
            device_mac=mac,
        )
        assert parse_rtls_line(format_rtls_line(rec)) == rec

    def test_stream_skips_malformed(self):
        lines = [GOOD_LINE, "garbage", GOOD_LINE, "a,b", ""]
        summary = IngestSummary()
        records = list(parse_rtls(lines, summary))
        assert len(records) == 2
        assert len(summary.errors) == 2
        assert summary.parsed == 2
        assert all(isinstance(e, ParseError) for e in summary.errors)


class TestFilter:
    def test_kept(self):
        rec = make_record(rssi=-61)
        assert list(filter_records([rec], FilterPolicy(min_rssi=-85))) == [rec]

    def test_unassociated_dropped(self):
        rec = make_record(association_status="unassociated")
        assert list(filter_records([rec], FilterPolicy(require_associated=True))) == []

    def test_weak_rssi_dropped(self):
        rec = make_record(rssi=-90)
        assert list(filter_records([rec], FilterPolicy(min_rssi=-85))) == []

    def test_invalid_timestamp_dropped(self):
        rec = make_record(timestamp=datetime(1970, 1, 1, tzinfo=timezone.utc))
        assert list(filter_records([rec], FilterPolicy())) == []
        kept = filter_records([rec], FilterPolicy(drop_invalid_timestamp=False))
        assert list(kept) == [rec]

    def test_idempotent(self, rng):
        records = [random_record(rng) for _ in range(300)]
        policy = FilterPolicy(min_rssi=-80)
        once = list(filter_records(records, policy))
        twice = list(filter_records(once, policy))
        assert once == twice

    def test_order_preserved(self, rng):
        records = [random_record(rng) for _ in range(100)]
        policy = FilterPolicy(min_rssi=-99, require_associated=False,
                              drop_invalid_timestamp=False)
        assert list(filter_records(records, policy)) == records

    def test_min_rssi_must_be_negative(self):
        with pytest.raises(Exception):
            FilterPolicy(min_rssi=10)


class TestAnonymize:
    def test_deterministic(self):
        rec = make_record()
        a = next(anonymize([rec], b"salt"))
        b = next(anonymize([rec], b"salt"))
        assert a == b
        assert a.device_mac != rec.device_mac

    def test_salts_differ(self):
        rec = make_record()
        a = next(anonymize([rec], b"salt-one"))
        b = next(anonymize([rec], b"salt-two"))
        assert a.device_mac != b.device_mac

    def test_no_collisions_10k(self):
        macs = {
            f"aa:bb:{(i >> 8) & 0xff:02x}:{i & 0xff:02x}:00:01" for i in range(10_000)
        }
        records = [make_record(device_mac=m) for m in sorted(macs)]
        out = list(anonymize(records, b"fixed-salt"))
        assert len({r.device_mac for r in out}) == 10_000

    def test_preserves_count_and_fields(self, rng):
        records = [random_record(rng) for _ in range(200)]
        out = list(anonymize(records, b"s"))
        assert len(out) == len(records)
        for before, after in zip(records, out):
            assert after.timestamp == before.timestamp
            assert after.rssi == before.rssi
            assert after.data_rate == before.data_rate
            assert after.association_status == before.association_status

    def test_pseudonym_is_valid_mac(self):
        out = next(anonymize([make_record()], b"s"))
        parse_rtls_line(format_rtls_line(out))  # must stay parseable

    def test_empty_salt(self):
        with pytest.raises(EmptySalt):
            list(anonymize([make_record()], b""))

    def test_registry_follows_anonymization(self):
        reg = DeviceRegistry(
            {"aa:bb:cc:dd:ee:01": RegistryEntry("u1", "smartphone_personal")}
        )
        rec = next(anonymize([make_record()], b"k"))
        reg2 = anonymize_registry(reg, b"k")
        assert reg2.user_of(rec.device_mac) == "u1"


class TestFiles:
    def test_records_round_trip(self, tmp_path, rng):
        records = [random_record(rng) for _ in range(50)]
        path = tmp_path / "trace.csv"
        write_records(path, records, header_comment="seed=1")
        assert read_records(path) == records

    def test_registry_round_trip(self, tmp_path):
        reg = DeviceRegistry(
            {
                "aa:00:00:00:00:01": RegistryEntry("u1", "smartphone_personal"),
                "aa:00:00:00:00:02": RegistryEntry("u1", "laptop"),
                "aa:00:00:00:00:03": RegistryEntry("u2", "shared"),
            }
        )
        path = tmp_path / "registry.csv"
        write_registry(path, reg, header_comment="x")
        got = read_registry(path)
        assert got.entries == reg.entries
        assert got.users() == ["u1", "u2"]
        assert got.macs_of_user("u1") == ["aa:00:00:00:00:01", "aa:00:00:00:00:02"]

    def test_registry_rejects_bad_class(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("mac,user_id,device_class\naa:00:00:00:00:01,u1,toaster\n")
        with pytest.raises(ParseError) as exc:
            read_registry(path)
        assert exc.value.field == "device_class"

    def test_registry_rejects_duplicate_mac(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text(
            "aa:00:00:00:00:01,u1,laptop\naa:00:00:00:00:01,u2,tablet\n"
        )
        with pytest.raises(ParseError):
            read_registry(path)
