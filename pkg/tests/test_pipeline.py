import json
import socket

import pytest

from telestage.errors import ConfigError, PipelineError
from telestage.pipeline import (PipelineConfig, _Run, build_report, render_report, run_pipeline)
from telestage.transport import STAGE_DELTAS, MeterSample, RecordType, StageStamps

SMALL = dict(width=96, height=72, fps=30.0, duration_s=1.0, warmup_frames=5, stall_timeout_s=1.0)


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines())


def frame_samples(e2e_ms, n=20):
    out = []
    for k in range(n):
        t0 = k * 33_333
        total = int(round(e2e_ms * 1000))
        st = StageStamps(t0, t0 + total // 5, t0 + total // 5 + 100, t0 + total // 2,
                         t0 + 3 * total // 4, t0 + total)
        out.append(MeterSample(RecordType.FRAME, 50_000, st.recv_ts, st, 1000))
    return out


def test_report_flags_at_reference_latency():
    rep = build_report(frame_samples(81.3))
    assert rep.end_to_end_ms.mean == pytest.approx(81.3)
    text, kvt = render_report(rep)
    assert "budget 100 ms (system target): PASS" in text
    assert "ITU-T G.114 150 ms one-way: PASS" in text
    k = kv(kvt)
    assert k["flag.budget_100ms"] == "PASS" and k["flag.itu_150ms"] == "PASS"
    assert float(k["e2e.mean_ms"]) == pytest.approx(81.3)
    assert list(k) == sorted(k)


def test_report_flags_at_120_ms():
    rep = build_report(frame_samples(120.0))
    k = kv(render_report(rep)[1])
    assert (k["flag.budget_100ms"], k["flag.itu_150ms"]) == ("FAIL", "PASS")
    assert not rep.all_pass


def test_report_stage_table_sums_to_total():
    rep = build_report(frame_samples(90.0))
    assert set(rep.stage_ms) == set(STAGE_DELTAS)
    assert sum(p.mean for p in rep.stage_ms.values()) == pytest.approx(rep.end_to_end_ms.mean)
    assert rep.monotone_fraction == 1.0


def test_haptics_only_report_omits_frames():
    samples = [MeterSample(RecordType.HAPTIC, 100_000, i * 33_333) for i in range(30)]
    rep = build_report(samples, span_s=1.0)
    text, kvt = render_report(rep)
    assert "frame samples" not in text and "frame bitrate" not in text and "flag.budget_100ms" not in kvt
    assert "haptic bitrate: 24.0 Mbps" in text
    assert kv(kvt)["haptic.bitrate_bps"] == "2.4e+07"
    assert rep.all_pass


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig(duration_s=0)
    with pytest.raises(ConfigError):
        PipelineConfig(fps=0)
    with pytest.raises(ConfigError):
        PipelineConfig(units=0, haptic_sensors=0)
    with pytest.raises(ConfigError):
        PipelineConfig(duration_s=0.01)
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"units": 2, "colour": "red"})
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"units": 1, "fps": 15.0}))
    assert PipelineConfig.load(p).fps == 15.0
    with pytest.raises(ConfigError):
        run_pipeline(PipelineConfig(duration_s=0.2, warmup_frames=10))


def test_short_run():
    cfg = PipelineConfig(**{**SMALL, "duration_s": 1.5})
    rep = run_pipeline(cfg)
    assert rep.samples == (45 - 5) * 2
    assert rep.monotone_fraction == 1.0
    assert rep.end_to_end_ms.p95 < 1000
    assert rep.fps == pytest.approx(60.0, rel=0.15)
    assert rep.haptic_bitrate_bps > 0 and rep.points_per_frame > 0
    total = sum(p.mean for p in rep.stage_ms.values())
    assert total == pytest.approx(rep.end_to_end_ms.mean, rel=1e-9)


def test_injected_delay_breaks_itu_budget():
    rep = run_pipeline(PipelineConfig(**SMALL, delay_ms=200.0))
    assert rep.end_to_end_ms.mean >= 200
    assert rep.pass_itu is False and rep.pass_budget is False
    assert kv(render_report(rep)[1])["flag.itu_150ms"] == "FAIL"


def test_content_hash_reproducible():
    a = run_pipeline(PipelineConfig(**SMALL, haptic_sensors=0, seed=3))
    b = run_pipeline(PipelineConfig(**SMALL, haptic_sensors=0, seed=3))
    c = run_pipeline(PipelineConfig(**SMALL, haptic_sensors=0, seed=4))
    assert a.content_hash == b.content_hash != c.content_hash


def test_haptics_only_run():
    rep = run_pipeline(PipelineConfig(units=0, haptic_sensors=2, duration_s=1.0))
    assert rep.end_to_end_ms is None and rep.haptic_bitrate_bps > 0
    # 2 sensors x 1000 Hz x 3 axes x 2 bytes, plus per-block framing
    assert rep.haptic_bitrate_bps == pytest.approx(2 * (6000 + 23 * 100) * 8, rel=0.1)


def test_unreachable_endpoint_is_attributed():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(PipelineError) as err:
        run_pipeline(PipelineConfig(**SMALL), connect_addr=f"127.0.0.1:{port}")
    assert err.value.stage == "connect"


def test_stalled_unit_is_attributed(monkeypatch):
    real = _Run.unit_sender

    def only_unit_zero(self, cal, addr, recording):
        if cal.unit_id == 0:
            real(self, cal, addr, recording)

    monkeypatch.setattr(_Run, "unit_sender", only_unit_zero)
    with pytest.raises(PipelineError) as err:
        run_pipeline(PipelineConfig(**SMALL, haptic_sensors=0))
    assert err.value.stage == "receive" and "seq 0" in str(err.value)
