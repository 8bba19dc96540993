import socket
import struct
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from telestage.errors import InvalidInputError, ProtocolError
from telestage.transport import (HapticBlock, MeterSample, Percentiles, RecordReader, RecordServer,
                                 RecordType, StageStamps, WireRecord, connect, iter_records, meter,
                                 now_us, parse_addr, read_record, send_all, write_record)

records = st.builds(WireRecord, st.integers(1, 255), st.binary(max_size=200))


def test_layout():
    assert write_record(WireRecord(2, b"abc")) == b"\x02\x03\x00\x00\x00abc"
    empty = write_record(WireRecord(RecordType.HAPTIC))
    assert len(empty) == 5
    assert read_record(empty) == (WireRecord(2, b""), 5)


@given(records)
def test_roundtrip(rec):
    wire = write_record(rec)
    assert len(wire) == rec.wire_size
    assert read_record(wire) == (rec, len(wire))


@given(st.lists(records, max_size=8))
def test_concatenation_parses_in_order(recs):
    wire = b"".join(write_record(r) for r in recs)
    out, pos = [], 0
    while True:
        rec, used = read_record(wire, pos)
        if rec is None:
            break
        out.append(rec)
        pos += used
    assert out == recs and pos == len(wire) == sum(r.wire_size for r in recs)


@given(st.lists(records, min_size=1, max_size=6), st.data())
def test_any_prefix_is_whole_records_plus_tail(recs, data):
    wire = b"".join(write_record(r) for r in recs)
    cut = data.draw(st.integers(0, len(wire)))
    reader = RecordReader()
    got = reader.feed(wire[:cut])
    assert got == recs[:len(got)]
    assert sum(r.wire_size for r in got) + reader.pending == cut
    assert got + reader.feed(wire[cut:]) == recs and reader.pending == 0


@given(st.lists(records, max_size=6), st.lists(st.integers(1, 17), min_size=1))
def test_chunked_feeding(recs, sizes):
    wire = b"".join(write_record(r) for r in recs)
    reader, out, pos, i = RecordReader(), [], 0, 0
    while pos < len(wire):
        n = sizes[i % len(sizes)]
        out += reader.feed(wire[pos:pos + n])
        pos += n
        i += 1
    assert out == recs


def test_partial_header_needs_more():
    assert read_record(b"\x01\x05\x00") == (None, 0)
    assert read_record(b"\x01\x05\x00\x00\x00abc") == (None, 0)


def test_protocol_errors_poison():
    r = RecordReader()
    with pytest.raises(ProtocolError):
        r.feed(b"\x01" + struct.pack("<I", 2**32 - 1))
    assert r.poisoned
    with pytest.raises(ProtocolError):
        r.feed(write_record(WireRecord(1, b"ok")))
    r = RecordReader()
    with pytest.raises(ProtocolError):
        r.feed(b"\x00\x00\x00\x00\x00")
    with pytest.raises(ProtocolError):
        write_record(WireRecord(0, b""))
    with pytest.raises(ProtocolError):
        read_record(b"\x01" + struct.pack("<I", 64 * 1024 * 1024))


def test_unknown_type_is_skippable():
    wire = write_record(WireRecord(200, b"future")) + write_record(WireRecord(1, b"x"))
    out = RecordReader().feed(wire)
    assert [r.record_type for r in out] == [200, 1]


def test_haptic_block():
    s = np.array([[1, -2, 3], [-32768, 32767, 0]], np.int16)
    hb = HapticBlock(4, 123_456_789, 1000, s)
    data = hb.to_bytes()
    assert data[:18] == struct.pack("<HQII", 4, 123_456_789, 1000, 2)
    assert len(data) == 18 + 12
    assert HapticBlock.from_bytes(data) == hb
    assert HapticBlock.from_bytes(HapticBlock(0, 0, 1000, np.zeros((0, 3))).to_bytes()).samples.shape == (0, 3)
    with pytest.raises(ProtocolError):
        HapticBlock.from_bytes(data[:-1])
    with pytest.raises(ProtocolError):
        HapticBlock.from_bytes(data[:10])


def test_meter_24_mbps():
    samples = [MeterSample(RecordType.HAPTIC, 100_000, i * 33_333) for i in range(30)]
    rep = meter(samples, span_s=1.0)
    assert rep.bitrate_bps == 24_000_000
    assert rep.total_bytes == 3_000_000


def test_meter_default_span():
    # n records evenly spaced at rate f span exactly n / f
    samples = [MeterSample(RecordType.FRAME, 1000, i * 100_000) for i in range(10)]
    rep = meter(samples)
    assert rep.span_s == pytest.approx(1.0)
    assert rep.fps == pytest.approx(10.0)
    assert rep.bitrate_bps == pytest.approx(80_000)


def test_meter_single_record_and_empty():
    rep = meter([MeterSample(RecordType.FRAME, 10, 5)])
    assert rep.fps is None and rep.bitrate_bps is None
    with pytest.raises(InvalidInputError):
        meter([])


def test_meter_latency_example():
    st_ = StageStamps(0, 10_000, 10_100, 12_000, 20_000, 81_300)
    rep = meter([MeterSample(RecordType.FRAME, 100, 12_000, st_, 5)])
    assert rep.end_to_end_ms.mean == pytest.approx(81.3)
    assert rep.end_to_end_ms.mean < 100 < 150
    assert rep.points_per_frame == 5


@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=20),
       st.lists(st.integers(1, 10_000), min_size=1, max_size=20))
def test_meter_additive(a, b):
    sa = [MeterSample(1, n, i) for i, n in enumerate(a)]
    sb = [MeterSample(2, n, 1000 + i) for i, n in enumerate(b)]
    ra, rb, rab = meter(sa, 1.0), meter(sb, 1.0), meter(sa + sb, 1.0)
    assert rab.total_bytes == ra.total_bytes + rb.total_bytes
    assert rab.n_records == ra.n_records + rb.n_records
    assert rab.bitrate_bps == pytest.approx(ra.bitrate_bps + rb.bitrate_bps)
    assert rab.bytes_by_type == {1: sum(a), 2: sum(b)}


@given(st.lists(st.integers(0, 1000), min_size=6, max_size=6))
def test_stamps(vals):
    s = StageStamps(*vals)
    assert s.is_monotone() == (sorted(vals) == vals)
    assert sum(s.deltas().values()) == s.end_to_end


def test_percentiles():
    p = Percentiles.of([1000 * i for i in range(1, 101)])
    assert p.mean == pytest.approx(50.5) and p.count == 100
    assert p.p50 == pytest.approx(50.5) and p.p99 == pytest.approx(99.01)
    assert Percentiles.of([]) is None


def test_clock_is_monotone():
    a = now_us()
    time.sleep(0.002)
    assert now_us() - a >= 1500


def test_socket_roundtrip():
    got = []
    srv = RecordServer("127.0.0.1:0", lambda cid, rec, ts: got.append((cid, rec))).start()
    try:
        recs = [WireRecord(1, bytes(range(200)) * 50), WireRecord(3, b""), WireRecord(2, b"h")]
        with connect(srv.address) as sock:
            for r in recs:
                send_all(sock, r)
        srv.join_connections(timeout=5, expected=1)
    finally:
        srv.close()
    assert [r for _, r in got] == recs and not srv.errors


def test_server_reports_protocol_errors():
    srv = RecordServer("127.0.0.1:0", lambda *a: None).start()
    try:
        with socket.create_connection(parse_addr(srv.address)) as sock:
            sock.sendall(b"\x00\x01\x00\x00\x00z")
        srv.join_connections(timeout=5, expected=1)
    finally:
        srv.close()
    assert srv.errors and isinstance(srv.errors[0], ProtocolError)


def test_iter_records_partial_close():
    a, b = socket.socketpair()
    a.sendall(write_record(WireRecord(1, b"abc")) + b"\x01\x09")
    a.close()
    it = iter_records(b)
    assert next(it) == WireRecord(1, b"abc")
    with pytest.raises(ProtocolError):
        next(it)
    b.close()


def test_parse_addr():
    assert parse_addr("127.0.0.1:80") == ("127.0.0.1", 80)
    assert parse_addr(":9") == ("127.0.0.1", 9)
