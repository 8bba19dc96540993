"""Loopback sender -> wire -> receiver pipeline with latency reporting.

Per capture unit a sender thread replays recorded sensor frames, densifying,
encoding and sending one per tick over its own TCP connection. On the
receiving side each connection gets a decode thread, and a single fusion thread joins the units'
frames by sequence number and renders them. Every stage stamps the shared
monotonic clock; stamps travel in a side table keyed by ``(unit, seq)``
because sender and receiver share the host.
"""

from __future__ import annotations

import hashlib
import json
import math
import queue
import random
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .capture import SceneRenderer, SweepSchedule, default_scene, ring_rig, sample_unit, schedule_sweeps
from .codec import EncodedFrame, decode_frame, encode_frame
from .densify import Densifier
from .errors import ConfigError, PipelineError
from .geometry import Pose
from .haptics import synth_gait
from .render import BiasConfig, VirtualCamera, fuse_render
from .transport import (STAGE_DELTAS, HapticBlock, MeterSample, Percentiles, RecordServer,
                        RecordType, StageStamps, WireRecord, connect, meter, now_us, send_all)

BUDGET_MS = 100.0
ITU_G114_MS = 150.0
REFERENCE_DEPLOYMENT = {
    "deployed_end_to_end_ms": 81.3,
    "deployed_units": 7,
    "deployed_points_per_frame": 1.5e6,
    "deployed_total_bitrate_bps": 3.5e9,
    "deployed_haptic_bitrate_bps": 24e6,
}


@dataclass
class PipelineConfig:
    units: int = 2
    width: int = 320
    height: int = 240
    hfov_deg: float = 70.0
    fps: float = 30.0
    duration_s: float = 10.0
    dropout: float = 0.5
    noise_sigma: float = 0.01
    tau: int = 25
    radius: Optional[int] = None
    jpeg_quality: int = 85
    s: float = 0.05
    address: str = "127.0.0.1:0"
    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    haptic_sensors: int = 1
    haptic_rate: int = 1000
    haptic_block_ms: float = 10.0
    seed: int = 0
    warmup_frames: int = 10
    stall_timeout_s: float = 2.0

    def __post_init__(self):
        if not self.fps > 0:
            raise ConfigError("fps must be positive")
        if not self.duration_s > 0:
            raise ConfigError("duration must be positive")
        if self.units < 0 or self.haptic_sensors < 0 or self.units + self.haptic_sensors == 0:
            raise ConfigError("need at least one capture unit or haptic sensor")
        if self.n_frames < 1:
            raise ConfigError("duration shorter than one frame")

    @property
    def n_frames(self) -> int:
        return int(round(self.fps * self.duration_s))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class LatencyReport:
    stage_ms: dict  # delta name -> Percentiles
    end_to_end_ms: Optional[Percentiles]
    bitrate_bps: Optional[float]
    frame_bitrate_bps: Optional[float]
    haptic_bitrate_bps: Optional[float]
    points_per_frame: Optional[float]
    fps: Optional[float]
    samples: int
    monotone_fraction: float = 1.0
    content_hash: str = ""
    haptic_latency_ms: Optional[Percentiles] = None
    budget_ms: float = BUDGET_MS
    itu_ms: float = ITU_G114_MS
    reference: dict = field(default_factory=lambda: dict(REFERENCE_DEPLOYMENT))

    @property
    def pass_budget(self) -> Optional[bool]:
        e = self.end_to_end_ms
        return None if e is None else e.mean < self.budget_ms

    @property
    def pass_itu(self) -> Optional[bool]:
        e = self.end_to_end_ms
        return None if e is None else e.mean < self.itu_ms

    @property
    def all_pass(self) -> bool:
        return all(f is not False for f in (self.pass_budget, self.pass_itu))


def build_report(samples, span_s: Optional[float] = None, content_hash: str = "",
                 haptic_latency_us=None) -> LatencyReport:
    traffic = meter(samples, span_s)
    stamped = [s.stamps for s in samples if s.stamps is not None]
    mono = sum(st.is_monotone() for st in stamped) / len(stamped) if stamped else 1.0
    return LatencyReport(
        stage_ms=traffic.stage_latency_ms,
        end_to_end_ms=traffic.end_to_end_ms,
        bitrate_bps=traffic.bitrate_bps,
        frame_bitrate_bps=traffic.bitrate_by_type.get(RecordType.FRAME),
        haptic_bitrate_bps=traffic.bitrate_by_type.get(RecordType.HAPTIC),
        points_per_frame=traffic.points_per_frame,
        fps=traffic.fps,
        samples=len(stamped),
        monotone_fraction=mono,
        content_hash=content_hash,
        haptic_latency_ms=Percentiles.of(haptic_latency_us or []),
    )


def _flag(ok):
    return "n/a" if ok is None else ("PASS" if ok else "FAIL")


def _mbps(bps):
    return "n/a" if bps is None else f"{bps / 1e6:.1f} Mbps"


def render_report(rep: LatencyReport):
    """Return ``(human_text, kv_text)``."""
    lines = []
    kv = {}
    if rep.end_to_end_ms is not None:
        lines.append(f"frame samples: {rep.samples}")
        lines.append(f"{'stage':<26}{'mean':>9}{'p50':>9}{'p95':>9}{'p99':>9}  (ms)")
        for name in STAGE_DELTAS:
            p = rep.stage_ms.get(name)
            if p is None:
                continue
            lines.append(f"{name:<26}{p.mean:9.2f}{p.p50:9.2f}{p.p95:9.2f}{p.p99:9.2f}")
            key = "stage." + name.replace("->", "_to_")
            kv.update({f"{key}.mean_ms": p.mean, f"{key}.p50_ms": p.p50,
                       f"{key}.p95_ms": p.p95, f"{key}.p99_ms": p.p99})
        e = rep.end_to_end_ms
        lines.append(f"{'end-to-end':<26}{e.mean:9.2f}{e.p50:9.2f}{e.p95:9.2f}{e.p99:9.2f}")
        kv.update({"e2e.mean_ms": e.mean, "e2e.p50_ms": e.p50, "e2e.p95_ms": e.p95,
                   "e2e.p99_ms": e.p99, "e2e.samples": rep.samples})
        lines.append(f"budget {rep.budget_ms:.0f} ms (system target): {_flag(rep.pass_budget)} "
                     f"(mean {e.mean:.1f} ms)")
        lines.append(f"ITU-T G.114 {rep.itu_ms:.0f} ms one-way: {_flag(rep.pass_itu)} "
                     f"(mean {e.mean:.1f} ms)")
        kv["flag.budget_100ms"] = _flag(rep.pass_budget)
        kv["flag.itu_150ms"] = _flag(rep.pass_itu)
        lines.append(f"frame bitrate: {_mbps(rep.frame_bitrate_bps)}")
        if rep.fps is not None:
            lines.append(f"frame records/s: {rep.fps:.1f}")
            kv["frame.records_per_s"] = rep.fps
        if rep.points_per_frame is not None:
            lines.append(f"points/frame: {rep.points_per_frame:.0f}")
            kv["frame.points_per_frame"] = rep.points_per_frame
        kv["frame.bitrate_bps"] = rep.frame_bitrate_bps
        kv["stamps.monotone_fraction"] = rep.monotone_fraction
        if rep.content_hash:
            lines.append(f"content hash: {rep.content_hash}")
            kv["frame.content_hash"] = rep.content_hash
    lines.append(f"haptic bitrate: {_mbps(rep.haptic_bitrate_bps)}")
    kv["haptic.bitrate_bps"] = rep.haptic_bitrate_bps
    if rep.haptic_latency_ms is not None:
        h = rep.haptic_latency_ms
        lines.append(f"haptic block latency: mean {h.mean:.2f} ms, p95 {h.p95:.2f} ms")
        kv["haptic.latency_mean_ms"] = h.mean
        kv["haptic.latency_p95_ms"] = h.p95
    lines.append(f"total bitrate: {_mbps(rep.bitrate_bps)}")
    kv["total.bitrate_bps"] = rep.bitrate_bps
    ref = rep.reference
    lines.append(
        f"reference (not reproducible at desk scale): {ref['deployed_end_to_end_ms']} ms end-to-end, "
        f"{ref['deployed_units']} units, {ref['deployed_points_per_frame']:.2g} points/frame, "
        f"{ref['deployed_total_bitrate_bps'] / 1e9:.1f} Gbps video, "
        f"{ref['deployed_haptic_bitrate_bps'] / 1e6:.0f} Mbps haptics")
    for k, v in ref.items():
        kv[f"reference.{k}"] = v
    kv_text = "".join(f"{k}={'' if v is None else (f'{v:.6g}' if isinstance(v, float) else v)}\n"
                      for k, v in sorted(kv.items()))
    return "\n".join(lines) + "\n", kv_text


def default_virtual_camera(cfg: PipelineConfig) -> VirtualCamera:
    from .geometry import Intrinsics

    intr = Intrinsics.from_fov(cfg.width, cfg.height, cfg.hfov_deg)
    return VirtualCamera(intr, Pose.look_at((0.0, -5.0, 1.6), (0.0, 0.0, 1.0)))


class _Run:
    """State shared by the threads of one pipeline run."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.scene = default_scene(cfg.seed)
        self.cals = ring_rig(cfg.units, cfg.width, cfg.height, cfg.hfov_deg) if cfg.units else []
        self.cam = default_virtual_camera(cfg)
        self.lock = threading.Lock()
        self.stamps: dict = {}
        self.samples: list = []
        self.haptic_latency: list = []
        self.errors: list = []
        self.decoded: queue.Queue = queue.Queue()
        self.conn_queues: dict = {}
        self.conn_threads: list = []
        self.hash = hashlib.sha256()
        self.stop = threading.Event()
        self.start_us = 0

    @property
    def warmup_end_us(self) -> int:
        if not self.cfg.units:
            return self.start_us
        return self.start_us + int(self.cfg.warmup_frames * 1e6 / self.cfg.fps)

    def fail(self, stage, exc):
        with self.lock:
            self.errors.append(exc if isinstance(exc, PipelineError) else PipelineError(repr(exc), stage))
        self.stop.set()

    # -- sender side ----------------------------------------------------------

    def sleep_until(self, t_us):
        while not self.stop.is_set():
            d = t_us - now_us()
            if d <= 0:
                return
            time.sleep(min(d / 1e6, 0.05))

    def record(self, cal) -> list:
        """Sensor output for one unit, produced before the clock starts.

        The simulated sensors stand in for hardware that costs the host no
        CPU, so their frames are replayed rather than ray-cast in real time.
        """
        cfg = self.cfg
        renderer = SceneRenderer(self.scene, cal)
        sched = SweepSchedule.evenly_staggered(3, cfg.fps / 3)
        phases = schedule_sweeps(sched, cfg.fps, cfg.n_frames)
        return [sample_unit(renderer.render(k / cfg.fps, seq=k), phases[k], cfg.noise_sigma,
                            cfg.dropout, cfg.seed) for k in range(cfg.n_frames)]

    def unit_sender(self, cal, addr, recording):
        cfg = self.cfg
        try:
            sock = connect(addr)
        except OSError as exc:
            self.fail("connect", PipelineError(f"endpoint {addr} unreachable: {exc}", "connect"))
            return
        dens = Densifier(cfg.tau, cfg.radius)
        try:
            with sock:
                for k in range(cfg.n_frames):
                    self.sleep_until(self.start_us + int(k * 1e6 / cfg.fps))
                    if self.stop.is_set():
                        return
                    raw = recording[k]
                    recording[k] = None
                    capture = now_us()
                    fused = dens.process(raw.replace(capture_ts=capture))
                    enc = encode_frame(fused, cfg.jpeg_quality)
                    encode_done = now_us()
                    with self.lock:
                        self.stamps[(cal.unit_id, k)] = {"capture_ts": capture, "encode_done": encode_done}
                    send_ts = now_us()
                    with self.lock:
                        self.stamps[(cal.unit_id, k)]["send_ts"] = send_ts
                    send_all(sock, WireRecord(RecordType.FRAME, enc.to_bytes()))
        except OSError as exc:
            self.fail("send", PipelineError(f"unit {cal.unit_id}: {exc}", "send"))
        except Exception as exc:
            self.fail("capture", exc)

    def haptic_sender(self, sensor_id, addr):
        cfg = self.cfg
        block = max(1, int(round(cfg.haptic_rate * cfg.haptic_block_ms / 1000)))
        n_blocks = int(math.ceil(cfg.duration_s * cfg.haptic_rate / block))
        stream, _ = synth_gait(int(cfg.duration_s * 2) + 1, 2.0, cfg.haptic_rate,
                               seed=cfg.seed + sensor_id, sensor_id=sensor_id)
        samples = np.resize(stream.samples, (n_blocks * block, 3))
        try:
            sock = connect(addr)
        except OSError as exc:
            self.fail("connect", PipelineError(f"endpoint {addr} unreachable: {exc}", "connect"))
            return
        try:
            with sock:
                for b in range(n_blocks):
                    # a block is sendable once its last sample has been taken
                    ready = self.start_us + int((b + 1) * block * 1e6 / cfg.haptic_rate)
                    self.sleep_until(ready)
                    if self.stop.is_set():
                        return
                    hb = HapticBlock(sensor_id, ready - int(block * 1e6 / cfg.haptic_rate),
                                     cfg.haptic_rate, samples[b * block:(b + 1) * block])
                    send_all(sock, WireRecord(RecordType.HAPTIC, hb.to_bytes()))
        except OSError as exc:
            self.fail("send", PipelineError(f"haptic sensor {sensor_id}: {exc}", "send"))

    # -- receiver side --------------------------------------------------------

    def on_record(self, conn_id, rec, ts):
        q = self.conn_queues.get(conn_id)
        if q is None:
            q = self.conn_queues[conn_id] = queue.Queue()
            t = threading.Thread(target=self.conn_decoder, args=(q,), daemon=True)
            self.conn_threads.append(t)
            t.start()
        q.put((rec, ts))

    def conn_decoder(self, q):
        cfg = self.cfg
        rng = random.Random(cfg.seed)
        last_due = 0
        while not self.stop.is_set():
            try:
                rec, arrival = q.get(timeout=0.1)
            except queue.Empty:
                continue
            try:
                if rec.record_type == RecordType.FRAME:
                    enc = EncodedFrame.from_bytes(rec.payload)
                    key = (enc.unit_id, enc.seq)
                    with self.lock:
                        send_ts = self.stamps[key]["send_ts"]
                    recv_ts = self._delay(arrival, send_ts, rng, last_due)
                    last_due = recv_ts
                    frame = decode_frame(enc)
                    decode_done = now_us()
                    with self.lock:
                        self.stamps[key].update(recv_ts=recv_ts, decode_done=decode_done)
                    self.decoded.put((frame, rec, recv_ts))
                elif rec.record_type == RecordType.HAPTIC:
                    hb = HapticBlock.from_bytes(rec.payload)
                    last_sample = hb.start_ts_us + int(len(hb.samples) * 1e6 / hb.sample_rate_hz)
                    recv_ts = self._delay(arrival, last_sample, rng, last_due)
                    last_due = recv_ts
                    if hb.start_ts_us < self.warmup_end_us:
                        continue  # same metering window as the frames
                    with self.lock:
                        self.samples.append(MeterSample.of(rec, recv_ts))
                        self.haptic_latency.append(recv_ts - last_sample)
            except Exception as exc:
                self.fail("decode", exc)
                return

    def _delay(self, arrival, sent, rng, last_due):
        cfg = self.cfg
        if cfg.delay_ms <= 0 and cfg.jitter_ms <= 0:
            return arrival
        extra = cfg.delay_ms + (rng.uniform(-cfg.jitter_ms, cfg.jitter_ms) if cfg.jitter_ms else 0.0)
        due = max(arrival, sent + int(max(extra, 0.0) * 1000), last_due)  # stream stays in order
        self.sleep_until(due)
        return max(now_us(), due)

    def fusion(self):
        cfg = self.cfg
        pending: dict = {}
        next_seq = 0
        bias = BiasConfig(cfg.s)
        while next_seq < cfg.n_frames and not self.stop.is_set():
            try:
                frame, rec, recv_ts = self.decoded.get(timeout=cfg.stall_timeout_s)
            except queue.Empty:
                have = sorted(pending.get(next_seq, {}))
                self.fail("receive", PipelineError(
                    f"no frame for {cfg.stall_timeout_s:.1f} s while waiting for seq {next_seq} "
                    f"(have units {have})", "receive"))
                return
            pending.setdefault(frame.seq, {})[frame.unit_id] = (frame, rec)
            while next_seq in pending and len(pending[next_seq]) == cfg.units:
                group = pending.pop(next_seq)
                frames = [group[u][0] for u in sorted(group)]
                try:
                    out = fuse_render(frames, self.cals, self.cam, bias)
                except Exception as exc:
                    self.fail("render", exc)
                    return
                render_done = now_us()
                for f in frames:
                    self.hash.update(f.depth.tobytes())
                self.hash.update(out.depth_mm().tobytes())
                with self.lock:
                    for u in sorted(group):
                        f, r = group[u]
                        st = self.stamps.pop((u, f.seq))
                        stamps = StageStamps(render_done=render_done, **st)
                        if f.seq >= cfg.warmup_frames:
                            self.samples.append(MeterSample.of(r, st["recv_ts"], stamps,
                                                               int(f.valid.sum())))
                next_seq += 1


def run_pipeline(cfg: PipelineConfig, connect_addr: Optional[str] = None) -> LatencyReport:
    """Run the loopback pipeline to completion and aggregate its stamps.

    ``connect_addr`` overrides the in-process server (used to test failure
    attribution against unreachable endpoints).
    """
    if cfg.units and cfg.n_frames <= cfg.warmup_frames:
        raise ConfigError(f"run of {cfg.n_frames} frames leaves nothing after warmup")
    run = _Run(cfg)
    server = None
    if connect_addr is None:
        try:
            server = RecordServer(cfg.address, run.on_record).start()
        except OSError as exc:
            raise PipelineError(f"cannot listen on {cfg.address}: {exc}", "listen") from None
        addr = server.address
    else:
        addr = connect_addr
    recordings = [run.record(cal) for cal in run.cals]
    run.start_us = now_us() + 200_000
    threads = [threading.Thread(target=run.unit_sender, args=(cal, addr, rec), daemon=True)
               for cal, rec in zip(run.cals, recordings)]
    threads += [threading.Thread(target=run.haptic_sender, args=(sid, addr), daemon=True)
                for sid in range(cfg.haptic_sensors)]
    fusion = threading.Thread(target=run.fusion, daemon=True) if cfg.units else None
    for t in threads:
        t.start()
    if fusion is not None:
        fusion.start()
    try:
        for t in threads:
            t.join()
        if fusion is not None:
            fusion.join()
        if server is not None:
            server.join_connections(timeout=cfg.stall_timeout_s)
            deadline = time.monotonic() + cfg.stall_timeout_s
            while any(not q.empty() for q in run.conn_queues.values()) and time.monotonic() < deadline:
                time.sleep(0.01)
    finally:
        run.stop.set()
        if server is not None:
            server.close()
            run.errors.extend(PipelineError(repr(e), "receive") for e in server.errors)
    if run.errors:
        raise run.errors[0]
    if not run.samples:
        raise PipelineError("no samples collected", "report")
    return build_report(run.samples, content_hash=run.hash.hexdigest() if cfg.units else "",
                        haptic_latency_us=run.haptic_latency)
