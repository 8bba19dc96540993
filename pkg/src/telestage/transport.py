"""Length-prefixed record framing over a reliable byte stream, plus metering.

Wire layout (little-endian): ``record_type u8 | length u32 | payload``.
Unknown record types are skipped by length; type 0 and lengths of 64 MiB or
more are protocol errors that poison the reader.
"""

from __future__ import annotations

import enum
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import InvalidInputError, ProtocolError

RECORD_HEADER = struct.Struct("<BI")
MAX_RECORD_LEN = 64 * 1024 * 1024
HAPTIC_HEADER = struct.Struct("<HQII")


class RecordType(enum.IntEnum):
    FRAME = 1
    HAPTIC = 2
    CLOCK_PROBE = 3


@dataclass(frozen=True)
class WireRecord:
    record_type: int
    payload: bytes = b""

    @property
    def length(self) -> int:
        return len(self.payload)

    @property
    def wire_size(self) -> int:
        return RECORD_HEADER.size + len(self.payload)


def write_record(rec: WireRecord) -> bytes:
    if rec.record_type == 0 or not 0 < rec.record_type < 256:
        raise ProtocolError(f"invalid record type {rec.record_type}")
    if len(rec.payload) >= MAX_RECORD_LEN:
        raise ProtocolError(f"record of {len(rec.payload)} bytes exceeds the 64 MiB cap")
    return RECORD_HEADER.pack(rec.record_type, len(rec.payload)) + bytes(rec.payload)


def read_record(buf, offset: int = 0):
    """Parse one record at ``buf[offset:]``.

    Returns ``(record, consumed)``; ``(None, 0)`` when more bytes are needed.
    """
    if len(buf) - offset < RECORD_HEADER.size:
        return None, 0
    rtype, length = RECORD_HEADER.unpack_from(buf, offset)
    if rtype == 0:
        raise ProtocolError("record type 0 is reserved")
    if length >= MAX_RECORD_LEN:
        raise ProtocolError(f"record length {length} exceeds the 64 MiB cap")
    end = offset + RECORD_HEADER.size + length
    if len(buf) < end:
        return None, 0
    return WireRecord(rtype, bytes(buf[offset + RECORD_HEADER.size:end])), end - offset


class RecordReader:
    """Incremental parser; once a protocol error occurs the stream is poisoned."""

    def __init__(self):
        self._buf = bytearray()
        self.poisoned = False

    def feed(self, data: bytes) -> list[WireRecord]:
        if self.poisoned:
            raise ProtocolError("stream poisoned by an earlier protocol error")
        self._buf += data
        out = []
        pos = 0
        try:
            while True:
                rec, used = read_record(self._buf, pos)
                if rec is None:
                    break
                out.append(rec)
                pos += used
        except ProtocolError:
            self.poisoned = True
            raise
        finally:
            del self._buf[:pos]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- haptic payload ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HapticBlock:
    sensor_id: int
    start_ts_us: int
    sample_rate_hz: int
    samples: np.ndarray  # (n, 3) int16 raw accelerometer LSBs

    def to_bytes(self) -> bytes:
        s = np.ascontiguousarray(self.samples, dtype="<i2").reshape(-1, 3)
        return HAPTIC_HEADER.pack(self.sensor_id, self.start_ts_us, self.sample_rate_hz,
                                  s.shape[0]) + s.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "HapticBlock":
        if len(data) < HAPTIC_HEADER.size:
            raise ProtocolError("haptic payload shorter than header")
        sid, ts, rate, n = HAPTIC_HEADER.unpack_from(data)
        if len(data) != HAPTIC_HEADER.size + 6 * n:
            raise ProtocolError(f"haptic payload length disagrees with n={n}")
        s = np.frombuffer(data, dtype="<i2", offset=HAPTIC_HEADER.size).reshape(n, 3)
        return cls(sid, ts, rate, s.astype(np.int16))

    def __eq__(self, other):
        return (isinstance(other, HapticBlock) and self.sensor_id == other.sensor_id
                and self.start_ts_us == other.start_ts_us
                and self.sample_rate_hz == other.sample_rate_hz
                and np.array_equal(self.samples, other.samples))


# -- stamps and metering -----------------------------------------------------

STAGES = ("capture_ts", "encode_done", "send_ts", "recv_ts", "decode_done", "render_done")
STAGE_DELTAS = tuple(f"{a}->{b}" for a, b in zip(STAGES, STAGES[1:]))


def now_us() -> int:
    """The shared monotonic clock, in microseconds."""
    return time.monotonic_ns() // 1000


@dataclass(frozen=True)
class StageStamps:
    capture_ts: int
    encode_done: int
    send_ts: int
    recv_ts: int
    decode_done: int
    render_done: int

    def values(self) -> tuple:
        return tuple(getattr(self, s) for s in STAGES)

    def is_monotone(self) -> bool:
        v = self.values()
        return all(b >= a for a, b in zip(v, v[1:]))

    def deltas(self) -> dict:
        v = self.values()
        return {name: b - a for name, a, b in zip(STAGE_DELTAS, v, v[1:])}

    @property
    def end_to_end(self) -> int:
        return self.render_done - self.capture_ts


@dataclass(frozen=True)
class MeterSample:
    record_type: int
    wire_bytes: int
    ts_us: int  # arrival on the shared clock
    stamps: Optional[StageStamps] = None
    points: Optional[int] = None  # valid depth pixels reported by the decoder

    @classmethod
    def of(cls, rec: WireRecord, ts_us: int, stamps=None, points=None) -> "MeterSample":
        return cls(rec.record_type, rec.wire_size, ts_us, stamps, points)


@dataclass(frozen=True)
class Percentiles:
    mean: float
    p50: float
    p95: float
    p99: float
    count: int

    @classmethod
    def of(cls, values_us: Sequence[float]) -> Optional["Percentiles"]:
        if len(values_us) == 0:
            return None
        a = np.asarray(values_us, dtype=np.float64) / 1000.0
        p50, p95, p99 = np.percentile(a, [50, 95, 99])
        return cls(float(a.mean()), float(p50), float(p95), float(p99), int(a.size))


@dataclass
class TrafficReport:
    n_records: int
    total_bytes: int
    bytes_by_type: dict
    records_by_type: dict
    span_s: Optional[float]
    bitrate_bps: Optional[float]
    bitrate_by_type: dict
    fps: Optional[float]
    points_per_frame: Optional[float]
    stage_latency_ms: dict = field(default_factory=dict)
    end_to_end_ms: Optional[Percentiles] = None


def meter(samples: Iterable[MeterSample], span_s: Optional[float] = None) -> TrafficReport:
    """Aggregate traffic and latency.

    The wall span defaults to the arrival spread extended by one mean
    inter-arrival period, so ``n`` evenly spaced records at rate ``f`` span
    exactly ``n / f``. With a single record the span is unknown and bitrate
    and fps are reported as absent.
    """
    samples = list(samples)
    if not samples:
        raise InvalidInputError("cannot meter an empty stream")
    total = sum(s.wire_bytes for s in samples)
    by_type: dict = {}
    count_by_type: dict = {}
    for s in samples:
        by_type[s.record_type] = by_type.get(s.record_type, 0) + s.wire_bytes
        count_by_type[s.record_type] = count_by_type.get(s.record_type, 0) + 1
    if span_s is None and len(samples) > 1:
        ts = sorted(s.ts_us for s in samples)
        spread = (ts[-1] - ts[0]) / 1e6
        span_s = spread * len(ts) / (len(ts) - 1) if spread > 0 else None
    bitrate = total * 8 / span_s if span_s else None
    bitrate_by_type = {k: v * 8 / span_s for k, v in by_type.items()} if span_s else {}

    frames = [s for s in samples if s.record_type == RecordType.FRAME]
    fps = None
    if len(frames) > 1 and span_s:
        fps = len(frames) / span_s
    pts = [s.points for s in frames if s.points is not None]
    stamped = [s.stamps for s in samples if s.stamps is not None]
    stage = {}
    for name in STAGE_DELTAS:
        p = Percentiles.of([st.deltas()[name] for st in stamped])
        if p is not None:
            stage[name] = p
    return TrafficReport(
        n_records=len(samples),
        total_bytes=total,
        bytes_by_type=by_type,
        records_by_type=count_by_type,
        span_s=span_s,
        bitrate_bps=bitrate,
        bitrate_by_type=bitrate_by_type,
        fps=fps,
        points_per_frame=float(np.mean(pts)) if pts else None,
        stage_latency_ms=stage,
        end_to_end_ms=Percentiles.of([st.end_to_end for st in stamped]),
    )


# -- sockets -----------------------------------------------------------------


def parse_addr(addr: str):
    host, _, port = addr.rpartition(":")
    return (host or "127.0.0.1", int(port))


def send_all(sock: socket.socket, rec: WireRecord) -> int:
    data = write_record(rec)
    sock.sendall(data)
    return len(data)


def iter_records(sock: socket.socket, chunk: int = 1 << 20) -> Iterator[WireRecord]:
    """Yield records until the peer closes the connection."""
    reader = RecordReader()
    while True:
        data = sock.recv(chunk)
        if not data:
            if reader.pending:
                raise ProtocolError(f"connection closed with {reader.pending} bytes of a partial record")
            return
        yield from reader.feed(data)


class RecordServer:
    """Accepts connections and hands every record to ``handler(conn_id, rec, ts_us)``.

    One reader thread per connection; ``handler`` calls are serialized.
    """

    def __init__(self, addr: str, handler):
        self._sock = socket.create_server(parse_addr(addr))
        self.address = "%s:%d" % self._sock.getsockname()[:2]
        self._handler = handler
        self._lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self.errors: list[BaseException] = []
        self._closing = False
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)

    def start(self) -> "RecordServer":
        self._acceptor.start()
        return self

    def _accept_loop(self):
        conn_id = 0
        while not self._closing:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve, args=(conn_id, conn), daemon=True)
            conn_id += 1
            self._threads.append(t)
            t.start()

    def _serve(self, conn_id, conn):
        try:
            with conn:
                for rec in iter_records(conn):
                    ts = now_us()
                    with self._lock:
                        self._handler(conn_id, rec, ts)
        except Exception as exc:  # surfaced to the owner via .errors
            self.errors.append(exc)

    def join_connections(self, timeout: Optional[float] = None, expected: int = 0) -> None:
        """Wait for connection threads to finish; ``expected`` waits for that many accepts first."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while len(self._threads) < expected and (deadline is None or time.monotonic() < deadline):
            time.sleep(0.001)
        for t in list(self._threads):
            t.join(None if deadline is None else max(0.0, deadline - time.monotonic()))

    def close(self) -> None:
        self._closing = True
        try:
            self._sock.close()
        except OSError:
            pass


def connect(addr: str, timeout: float = 5.0) -> socket.socket:
    sock = socket.create_connection(parse_addr(addr), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(None)
    return sock
