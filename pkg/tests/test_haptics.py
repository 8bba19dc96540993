import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import signal

from telestage import haptics
from telestage.errors import ConfigError, InsufficientDataError, InvalidInputError
from telestage.haptics import (DEFAULT_SCALE, AccelStream, EqConfig, EqSection, Equalizer,
                               cascade_response, envelope, equalize, gait_gate, gate_window,
                               is_stable, synth_gait)

FS = 1000


def stream(a, fs=FS):
    return AccelStream(0, fs, np.rint(np.asarray(a) / DEFAULT_SCALE).astype(np.int16))


def steady_amplitude(y, fs, f, settle_s=0.5):
    """Least-squares sine amplitude at ``f`` after the transient."""
    t = np.arange(len(y)) / fs
    keep = t >= settle_s
    basis = np.stack([np.sin(2 * np.pi * f * t[keep]), np.cos(2 * np.pi * f * t[keep])], axis=1)
    coef, *_ = np.linalg.lstsq(basis, y[keep], rcond=None)
    return float(np.hypot(*coef))


# -- envelope --------------------------------------------------------------------


def test_envelope_of_zero_and_gravity():
    assert not envelope(AccelStream(0, FS, np.zeros((500, 3), np.int16))).any()
    a = np.zeros((2000, 3))
    a[:, 2] = 9.80665
    env = envelope(stream(a))
    assert env.max() < 0.01 * 9.80665
    with pytest.raises(InvalidInputError):
        envelope(AccelStream(0, FS, np.zeros((0, 3), np.int16)))


def test_single_burst_gives_one_lobe_near_centre():
    t = np.arange(3000) / FS
    a = np.zeros((3000, 3))
    a[:, 2] = 9.80665
    tau = t - 0.975
    on = (tau >= 0) & (tau < 0.05)
    a[on, 0] += 20 * np.sin(np.pi * tau[on] / 0.05) ** 2 * np.sin(2 * np.pi * 100 * tau[on])
    env = envelope(stream(a))
    assert env.min() >= 0
    assert abs(np.argmax(env) / FS - 1.0) <= 0.015
    peaks, _ = signal.find_peaks(env, height=0.1 * env.max())
    assert len(peaks) == 1


# -- gate ------------------------------------------------------------------------


def test_hundred_steps_with_echoes():
    s, onsets = synth_gait(100, 2.0, echo_gain=0.6)
    r = gait_gate(s)
    t = np.array([e.t for e in r.events])
    assert len(t) == 100
    assert np.abs(t - onsets).max() < 0.020
    assert np.all(np.diff(t) >= 0.5 * r.period_s)


@pytest.mark.parametrize("cadence", [1.0, 2.0, 3.0])
@pytest.mark.parametrize("echo", [0.0, 0.4, 0.8])
def test_event_count_across_cadences(cadence, echo):
    s, onsets = synth_gait(40, cadence, echo_gain=echo, seed=int(cadence * 10 + echo * 10))
    r = gait_gate(s)
    assert len(r.events) == len(onsets)
    assert r.period_s == pytest.approx(1 / cadence, rel=0.1)
    t = [e.t for e in r.events]
    assert all(b > a for a, b in zip(t, t[1:]))


def test_jittered_gait():
    s, onsets = synth_gait(60, 2.0, echo_gain=0.7, jitter=0.03, seed=4)
    r = gait_gate(s)
    t = np.array([e.t for e in r.events])
    assert len(t) == 60 and np.abs(t - onsets).max() < 0.020


def test_silence_and_noise_yield_no_events():
    quiet = AccelStream(0, FS, np.zeros((5000, 3), np.int16))
    r = gait_gate(quiet)
    assert r.events == [] and not r.gated.any()
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.2, (8000, 3))
    a[:, 2] += 9.80665
    assert gait_gate(stream(a)).events == []


def test_gate_errors():
    short = AccelStream(0, FS, np.zeros((3000, 3), np.int16))
    with pytest.raises(InsufficientDataError):
        gait_gate(short)  # 3 s < 2 / 0.5 s
    with pytest.raises(ConfigError):
        gait_gate(short, 2.0, 1.0)
    with pytest.raises(InvalidInputError):
        AccelStream(0, 0, np.zeros((3, 3)))
    with pytest.raises(InvalidInputError):
        AccelStream(0, FS, np.zeros((3, 2)))


def test_gated_signal_is_zero_outside_windows():
    s, _ = synth_gait(20, 2.0)
    r = gait_gate(s)
    assert r.window.max() == pytest.approx(1.0, abs=0.05)
    assert not r.gated[r.window == 0].any()
    assert np.any(r.gated[r.window > 0])


@given(st.lists(st.floats(0, 1.0), max_size=6))
def test_gate_window_support(onsets):
    n = 1200
    w = gate_window(n, FS, onsets)
    assert w.min() >= 0 and w.max() <= 1
    inside = np.zeros(n, bool)
    for t in onsets:
        i = int(round(t * FS))
        inside[i:i + 100] = True
    assert not w[~inside].any()


def test_events_carry_position_and_sensor():
    s, _ = synth_gait(10, 2.0, sensor_id=3)
    s = AccelStream(3, s.sample_rate, s.samples, s.scale, start_ts=5.0, position=(1.5, -2.0))
    ev = gait_gate(s).events
    assert ev and all(e.sensor_id == 3 and (e.x, e.y) == (1.5, -2.0) and e.t > 5 for e in ev)


# -- equalizer --------------------------------------------------------------------


def test_coefficients_match_scipy_designs():
    # RBJ low/high-pass with Q = 1/sqrt(2) is the bilinear Butterworth prototype
    for kind, btype in (("lowpass", "low"), ("highpass", "high")):
        ours = EqSection(kind, 120.0).coefficients(FS)
        b, a = signal.butter(2, 120.0, btype=btype, fs=FS)
        assert np.allclose(ours, np.concatenate([b, a]), atol=1e-12)


def test_analytic_response_values():
    for kind, f in (("lowpass", 300.0), ("highpass", 20.0)):
        h = cascade_response(EqSection(kind, f).coefficients(FS)[None], FS, [f])
        assert abs(h[0]) == pytest.approx(1 / math.sqrt(2), rel=1e-9)
    pk = EqSection("peaking", 80.0, 1.0, 6.0).coefficients(FS)[None]
    assert abs(cascade_response(pk, FS, [80.0])[0]) == pytest.approx(10 ** (6 / 20), rel=1e-9)
    hp = EqConfig.default().sos(FS)
    assert abs(cascade_response(hp, FS, [0.0])[0]) < 1e-12


def test_cascade_response_matches_sosfreqz():
    sos = EqConfig.default().sos(FS)
    f = np.linspace(1, 499, 50)
    _, h = signal.sosfreqz(sos, worN=f, fs=FS)
    assert np.allclose(cascade_response(sos, FS, f), h, rtol=1e-10)


def test_measured_response_at_ten_probes():
    eq = EqConfig.default()
    sos = eq.sos(FS)
    t = np.arange(3 * FS) / FS
    for f in np.geomspace(15, 400, 10):
        y = equalize(np.sin(2 * np.pi * f * t), eq, FS)
        expected = abs(cascade_response(sos, FS, [f])[0])
        assert steady_amplitude(y, FS, f) == pytest.approx(expected, rel=0.02)


def test_peaking_gain_at_centre():
    eq = EqConfig((EqSection("peaking", 80.0, 1.0, 6.0),))
    t = np.arange(2 * FS) / FS
    y = equalize(np.sin(2 * np.pi * 80 * t), eq, FS)
    assert steady_amplitude(y, FS, 80.0) == pytest.approx(1.995, rel=0.02)


def test_dc_is_removed():
    y = equalize(np.full(4 * FS, 5.0), EqConfig.default(), FS)
    assert np.abs(y[-FS:]).max() < 0.01 * 5.0


def test_empty_cascade_is_identity():
    x = np.random.default_rng(0).normal(size=100)
    assert np.array_equal(equalize(x, EqConfig()), x)


@given(st.integers(-4, 4), st.integers(0, 2**31))
def test_linearity(k, seed):
    x = np.random.default_rng(seed).normal(size=300)
    a = 2.0 ** k  # power-of-two gains scale exactly in floating point
    assert np.array_equal(equalize(a * x, EqConfig.default()), a * equalize(x, EqConfig.default()))


def test_linearity_general_gain():
    x = np.random.default_rng(1).normal(size=500)
    y = equalize(x, EqConfig.default())
    assert np.allclose(equalize(0.37 * x, EqConfig.default()), 0.37 * y, rtol=1e-12, atol=1e-15)


@given(st.lists(st.integers(1, 97), min_size=1, max_size=8))
def test_streaming_matches_batch(sizes):
    x = np.random.default_rng(2).normal(size=(400, 3))
    eq = Equalizer(EqConfig.default())
    out, pos, i = [], 0, 0
    while pos < len(x):
        out.append(eq.process(x[pos:pos + sizes[i % len(sizes)]]))
        pos += sizes[i % len(sizes)]
        i += 1
    assert np.allclose(np.concatenate(out), equalize(x, EqConfig.default()), atol=1e-12)


def test_stability_checks():
    assert all(is_stable(r) for r in EqConfig.default().sos(FS))
    assert not is_stable([1, 0, 0, 1, 0, 1.0])
    assert not is_stable([1, 0, 0, 1, -2.1, 1.05])
    with pytest.raises(ConfigError):
        EqSection("peaking", 80.0, -1.0).coefficients(FS)
    with pytest.raises(ConfigError):
        EqSection("notch", 80.0).coefficients(FS)
    with pytest.raises(ConfigError):
        EqSection("lowpass", 600.0).coefficients(FS)


def test_eq_from_spec():
    eq = EqConfig.from_spec("highpass:20, peaking:80:1:6 ,lowpass:300")
    assert eq == EqConfig.default()
    assert EqConfig.from_spec("") == EqConfig()


# -- files ----------------------------------------------------------------------------


def test_wav_roundtrip(tmp_path):
    s, _ = synth_gait(5, 2.0)
    haptics.write_wav(tmp_path / "a.wav", s.samples, 1000)
    back = haptics.read_wav(tmp_path / "a.wav", sensor_id=2)
    assert back.sensor_id == 2 and back.sample_rate == 1000
    assert np.array_equal(back.samples, s.samples)
    haptics.write_wav(tmp_path / "m.wav", haptics.to_pcm16(np.sin(np.arange(100))), 1000)
    with pytest.raises(InvalidInputError):
        haptics.read_wav(tmp_path / "m.wav")


def test_pcm16_scaling():
    p = haptics.to_pcm16(np.array([0.0, 0.5, -1.0]))
    assert p.tolist() == [0, 16384, -32767]
    assert not haptics.to_pcm16(np.zeros(4)).any()


def test_events_csv_roundtrip(tmp_path):
    s, _ = synth_gait(8, 2.0)
    ev = gait_gate(s).events
    haptics.write_events_csv(tmp_path / "e.csv", ev)
    back = haptics.read_events_csv(tmp_path / "e.csv")
    assert len(back) == len(ev)
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "t,sensor_id,intensity,x,y"
    for a, b in zip(ev, back):
        assert b.t == pytest.approx(a.t, abs=1e-6) and b.intensity == pytest.approx(a.intensity, rel=1e-5)


def test_drive_signal_principal_axis():
    g = np.outer(np.sin(np.arange(200) / 5.0), [0.0, 0.6, 0.8])
    d = haptics.drive_signal(g)
    assert np.allclose(np.abs(d), np.abs(np.sin(np.arange(200) / 5.0)), atol=1e-9)
    assert not haptics.drive_signal(np.zeros((10, 3))).any()
