"""Command-line entry point: ``telestage <command> ...``."""

from __future__ import annotations

import argparse
import sys
import threading
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import capture, codec, densify, floor, geometry, haptics, pipeline, render, transport
from .errors import ConfigError, TelestageError


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _frames_by_unit(directory):
    paths = capture.list_frames(directory)
    if not paths:
        raise ConfigError(f"no frame files in {directory}")
    by_unit = defaultdict(list)
    for p in paths:
        f = capture.load_frame(p)
        by_unit[f.unit_id].append(f)
    return by_unit


def cmd_simulate(args):
    scene = capture.load_scene(args.scene) if args.scene else capture.default_scene(args.seed)
    if args.units:
        cals = geometry.load_calibration(args.units)
    else:
        cals = capture.ring_rig(args.n_units, args.width, args.height)
    out = _out_dir(args.out)
    if not args.units:
        geometry.save_calibration(out / "calib.txt", cals)
    n = 0
    for frame in capture.simulate(scene, cals, args.frames, dropout=args.dropout,
                                  noise_sigma=args.noise):
        capture.save_frame(out, frame)
        n += 1
    print(f"wrote {n} frames for {len(cals)} units to {out}")
    return 0


def cmd_densify(args):
    out = _out_dir(args.out)
    n = 0
    for unit, frames in sorted(_frames_by_unit(args.inp).items()):
        dens = densify.Densifier(args.tau, args.radius)
        for f in frames:
            fused = dens.process(f)
            capture.save_frame(out, fused)
            if args.masks:
                densify.write_pgm(out / f"mask_unit{unit:02d}_{f.seq:06d}.pgm", dens.last_mask)
            n += 1
    print(f"densified {n} frames into {out}")
    return 0


def cmd_render(args):
    cals = geometry.load_calibration(args.calib)
    cam_cal = geometry.load_calibration(args.cam)
    if len(cam_cal) != 1:
        raise ConfigError("camera file must hold exactly one block")
    cam = render.VirtualCamera.from_calibration(cam_cal[0])
    out = _out_dir(args.out)
    by_seq = defaultdict(list)
    for frames in _frames_by_unit(args.inp).values():
        for f in frames:
            by_seq[f.seq].append(f)
    cfg = render.BiasConfig(args.s)
    for seq in sorted(by_seq):
        frames = sorted(by_seq[seq], key=lambda f: f.unit_id)
        res = render.fuse_render(frames, cals, cam, cfg)
        render.write_png(out / f"view_{seq:06d}.png", res.rgb)
        densify.write_pgm(out / f"depth_{seq:06d}.pgm", res.depth_mm())
        densify.write_pgm(out / f"source_{seq:06d}.pgm", (res.source_id + 1).astype(np.uint8))
        if not args.no_ply:
            render.write_ply(out / f"cloud_{seq:06d}.ply", res)
    print(f"rendered {len(by_seq)} views into {out}")
    return 0


def cmd_serve(args):
    out = _out_dir(args.out) if args.out else None
    samples = []
    done = threading.Event()

    def handle(conn_id, rec, ts):
        samples.append(transport.MeterSample.of(rec, ts))
        if out is not None and rec.record_type == transport.RecordType.FRAME:
            capture.save_frame(out, codec.decode_frame(codec.EncodedFrame.from_bytes(rec.payload)))
        if args.count and len(samples) >= args.count:
            done.set()

    server = transport.RecordServer(args.listen, handle).start()
    print(f"listening on {server.address}", flush=True)
    try:
        done.wait(args.duration if args.duration else None)
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    for e in server.errors:
        print(f"receive error: {e}", file=sys.stderr)
    rep = transport.meter(samples)
    print(f"records: {rep.n_records}  bytes: {rep.total_bytes}")
    if rep.bitrate_bps is not None:
        print(f"bitrate: {rep.bitrate_bps / 1e6:.3f} Mbps")
    return 1 if server.errors else 0


def cmd_send(args):
    paths = capture.list_frames(args.inp)
    if not paths:
        raise ConfigError(f"no frame files in {args.inp}")
    period = 1.0 / args.fps
    sent = 0
    with transport.connect(args.connect) as sock:
        t0 = time.monotonic()
        last_seq = None
        tick = -1
        for p in paths:
            f = capture.load_frame(p)
            if f.seq != last_seq:
                tick += 1
                last_seq = f.seq
                delay = t0 + tick * period - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            enc = codec.encode_frame(f, args.quality)
            sent += transport.send_all(sock, transport.WireRecord(transport.RecordType.FRAME,
                                                                  enc.to_bytes()))
    print(f"sent {len(paths)} frames, {sent} bytes")
    return 0


def cmd_haptics(args):
    stream = haptics.read_wav(args.inp, args.sensor_id)
    if args.rate and stream.sample_rate != args.rate:
        raise ConfigError(f"{args.inp} is sampled at {stream.sample_rate} Hz, expected {args.rate}")
    stream = haptics.AccelStream(stream.sensor_id, stream.sample_rate, stream.samples,
                                 stream.scale, 0.0, tuple(args.position))
    res = haptics.gait_gate(stream)
    haptics.write_events_csv(args.events, res.events)
    if args.gated:
        eq = haptics.EqConfig.from_spec(args.eq) if args.eq else haptics.EqConfig.default()
        drive = haptics.equalize(haptics.drive_signal(res.gated), eq, stream.sample_rate)
        haptics.write_wav(args.gated, haptics.to_pcm16(drive), stream.sample_rate)
    period = f"{res.period_s:.3f} s" if res.period_s else "n/a"
    print(f"{len(res.events)} step events (period {period}) -> {args.events}")
    return 0


def cmd_floor_plan(args):
    plan = floor.plan_actuators(args.rows, args.cols, args.budget, args.alpha, args.max_db,
                                args.connectivity, args.pitch)
    floor.save_plan(args.out, plan)
    print(f"{len(plan.actuators)} actuators, max attenuation {plan.max_attenuation:.1f} dB -> {args.out}")
    return 0


def cmd_floor_map(args):
    plan = floor.load_plan(args.plan)
    events = haptics.read_events_csv(args.events)
    cmds = []
    for ev in events:
        cmds.extend(floor.map_step(ev, plan, args.pattern, args.radius))
    floor.write_commands_csv(args.out, cmds)
    print(f"{len(cmds)} commands for {len(events)} events -> {args.out}")
    return 0


def cmd_pipeline_run(args):
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else pipeline.PipelineConfig()
    rep = pipeline.run_pipeline(cfg)
    text, kv = pipeline.render_report(rep)
    sys.stdout.write(text)
    Path(args.report).write_text(kv)
    if args.enforce and not rep.all_pass:
        print("budget check failed", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="telestage", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="ray-cast a scene and sample per-unit RGB-D frames")
    p.add_argument("--scene", help="JSON scene file (default: built-in scene)")
    p.add_argument("--units", help="calibration file (default: ring rig, written to OUT/calib.txt)")
    p.add_argument("--n-units", type=int, default=2)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.01, help="depth noise sigma, meters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("densify", help="motion-masked temporal fill of sparse depth")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=int, default=densify.DEFAULT_TAU)
    p.add_argument("--radius", type=int, default=None)
    p.add_argument("--masks", action="store_true", help="also dump motion masks as PGM")
    p.set_defaults(func=cmd_densify)

    p = sub.add_parser("render", help="fuse units into a virtual view")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--cam", required=True, help="one calibration block for the virtual camera")
    p.add_argument("--s", type=float, default=0.05, help="depth-bias scale, meters")
    p.add_argument("--out", required=True)
    p.add_argument("--no-ply", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("serve", help="receive records and meter them")
    p.add_argument("--listen", default="127.0.0.1:7600")
    p.add_argument("--out", help="directory for decoded frames")
    p.add_argument("--count", type=int, default=0, help="stop after this many records")
    p.add_argument("--duration", type=float, default=0.0, help="stop after this many seconds")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("send", help="encode frame files and stream them")
    p.add_argument("--connect", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--quality", type=int, default=codec.DEFAULT_JPEG_QUALITY)
    p.set_defaults(func=cmd_send)

    p = sub.add_parser("haptics", help="detect footsteps in a 3-axis accelerometer WAV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--rate", type=int, default=0, help="expected sample rate, Hz")
    p.add_argument("--events", required=True)
    p.add_argument("--gated", help="write the gated, equalized drive signal as mono WAV")
    p.add_argument("--eq", help="sections as kind:freq:q:gain_db,...")
    p.add_argument("--sensor-id", type=int, default=0)
    p.add_argument("--position", type=float, nargs=2, default=(0.0, 0.0), metavar=("X", "Y"))
    p.set_defaults(func=cmd_haptics)

    fl = sub.add_parser("floor", help="actuator planning and step mapping").add_subparsers(
        dest="floor_command", required=True)
    p = fl.add_parser("plan")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--alpha", type=float, default=floor.DEFAULT_ALPHA)
    p.add_argument("--max-db", type=float, default=None)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--pitch", type=float, default=0.6)
    p.add_argument("--out", default="plan.txt")
    p.set_defaults(func=cmd_floor_plan)
    p = fl.add_parser("map")
    p.add_argument("--plan", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--pattern", choices=("floor_wide", "localized"), default="floor_wide")
    p.add_argument("--radius", type=float, default=floor.DEFAULT_RADIUS)
    p.add_argument("--out", default="commands.csv")
    p.set_defaults(func=cmd_floor_map)

    pl = sub.add_parser("pipeline", help="end-to-end loopback run").add_subparsers(
        dest="pipeline_command", required=True)
    p = pl.add_parser("run")
    p.add_argument("--config", help="JSON file with PipelineConfig fields")
    p.add_argument("--report", default="report.kv")
    p.add_argument("--enforce", action="store_true", help="exit nonzero if a budget flag fails")
    p.set_defaults(func=cmd_pipeline_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TelestageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
