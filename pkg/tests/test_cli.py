import json
import socket
import subprocess
import sys
import threading

import numpy as np
import pytest

from telestage import capture, floor, haptics
from telestage.cli import main
from telestage.geometry import load_calibration, save_calibration


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--n-units", "2", "--width", "64", "--height", "48",
                 "--frames", "4", "--out", str(d)]) == 0
    return d


def test_simulate_writes_frames_and_calibration(sim_dir):
    assert len(capture.list_frames(sim_dir)) == 8
    assert [c.unit_id for c in load_calibration(sim_dir / "calib.txt")] == [0, 1]
    f = capture.load_frame(capture.list_frames(sim_dir)[0])
    assert f.depth.shape == (48, 64)


def test_densify(sim_dir, tmp_path):
    assert main(["densify", "--in", str(sim_dir), "--out", str(tmp_path), "--masks"]) == 0
    raw = capture.load_frame(sim_dir / "unit00_000003.npz")
    fused = capture.load_frame(tmp_path / "unit00_000003.npz")
    assert fused.valid.sum() > raw.valid.sum()
    assert (tmp_path / "mask_unit01_000002.pgm").exists()


def test_render(sim_dir, tmp_path):
    cals = load_calibration(sim_dir / "calib.txt")
    save_calibration(tmp_path / "cam.txt", cals[:1])
    out = tmp_path / "out"
    assert main(["render", "--in", str(sim_dir), "--calib", str(sim_dir / "calib.txt"),
                 "--cam", str(tmp_path / "cam.txt"), "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert {"view_000000.png", "depth_000000.pgm", "source_000000.pgm", "cloud_000000.ply"} <= set(names)
    assert main(["render", "--in", str(sim_dir), "--calib", str(sim_dir / "calib.txt"),
                 "--cam", str(sim_dir / "calib.txt"), "--out", str(out)]) == 2


def test_serve_and_send(sim_dir, tmp_path):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    result = {}
    t = threading.Thread(target=lambda: result.setdefault("rc", main(
        ["serve", "--listen", f"127.0.0.1:{port}", "--out", str(tmp_path), "--count", "8",
         "--duration", "20"])))
    t.start()
    for _ in range(200):
        try:
            socket.create_connection(("127.0.0.1", port)).close()
            break
        except OSError:
            threading.Event().wait(0.02)
    assert main(["send", "--connect", f"127.0.0.1:{port}", "--in", str(sim_dir), "--fps", "100"]) == 0
    t.join(30)
    assert result["rc"] == 0
    got = capture.list_frames(tmp_path)
    assert len(got) == 8
    a = capture.load_frame(sim_dir / "unit01_000002.npz")
    b = capture.load_frame(tmp_path / "unit01_000002.npz")
    assert np.array_equal(a.depth, b.depth)


def test_haptics_and_floor(tmp_path, capsys):
    stream, onsets = haptics.synth_gait(12, 2.0)
    haptics.write_wav(tmp_path / "steps.wav", stream.samples, 1000)
    assert main(["haptics", "--in", str(tmp_path / "steps.wav"), "--rate", "1000",
                 "--events", str(tmp_path / "ev.csv"), "--gated", str(tmp_path / "g.wav"),
                 "--position", "3.0", "2.0"]) == 0
    ev = haptics.read_events_csv(tmp_path / "ev.csv")
    assert len(ev) == 12 and ev[0].x == 3.0
    assert (tmp_path / "g.wav").stat().st_size > 44
    assert main(["haptics", "--in", str(tmp_path / "steps.wav"), "--rate", "48000",
                 "--events", str(tmp_path / "x.csv")]) == 2

    plan = tmp_path / "plan.txt"
    assert main(["floor", "plan", "--rows", "16", "--cols", "22", "--budget", "128",
                 "--alpha", "6", "--max-db", "6", "--out", str(plan)]) == 0
    assert floor.load_plan(plan).max_attenuation <= 6
    assert main(["floor", "map", "--plan", str(plan), "--events", str(tmp_path / "ev.csv"),
                 "--pattern", "localized", "--out", str(tmp_path / "cmd.csv")]) == 0
    lines = (tmp_path / "cmd.csv").read_text().splitlines()
    assert lines[0] == "t,channel,gain,waveform_id" and len(lines) > 12
    assert main(["floor", "plan", "--rows", "16", "--cols", "22", "--budget", "20",
                 "--max-db", "6", "--out", str(tmp_path / "bad.txt")]) == 2
    assert "error:" in capsys.readouterr().err


def test_pipeline_run(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"width": 64, "height": 48, "duration_s": 1.0, "warmup_frames": 5}))
    rep = tmp_path / "report.kv"
    assert main(["pipeline", "run", "--config", str(cfg), "--report", str(rep), "--enforce"]) == 0
    assert "end-to-end" in capsys.readouterr().out
    kv = dict(l.split("=", 1) for l in rep.read_text().splitlines())
    assert kv["flag.itu_150ms"] == "PASS"
    cfg.write_text(json.dumps({"width": 64, "height": 48, "duration_s": 1.0, "warmup_frames": 5,
                               "delay_ms": 160.0}))
    assert main(["pipeline", "run", "--config", str(cfg), "--report", str(rep), "--enforce"]) == 1
    assert main(["pipeline", "run", "--config", str(cfg), "--report", str(rep)]) == 0
    cfg.write_text(json.dumps({"duration_s": 0}))
    assert main(["pipeline", "run", "--config", str(cfg), "--report", str(rep)]) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "telestage", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("simulate", "densify", "render", "serve", "send", "haptics", "floor", "pipeline"):
        assert cmd in r.stdout
