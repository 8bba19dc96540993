"""Footstep conditioning for shoe-mounted accelerometers.

The chain is: envelope of the de-meaned acceleration magnitude, a
gait-periodicity gate that admits one burst per step, and an equalizer made
of RBJ-cookbook biquad sections that shapes the drive signal.
"""

from __future__ import annotations

import csv
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .errors import ConfigError, InsufficientDataError, InvalidInputError

DEFAULT_RATE = 1000
# +-8 g full scale on a 16-bit converter
DEFAULT_SCALE = 8 * 9.80665 / 32768
ENVELOPE_CORNER_HZ = 20.0
ATTACK_S = 0.020
RELEASE_S = 0.080
ONSET_FRACTION = 0.1
SUBHARMONIC_RATIO = 0.8
MIN_PERIODICITY = 0.3
RELATIVE_FLOOR = 0.1


@dataclass(frozen=True, eq=False)
class AccelStream:
    sensor_id: int
    sample_rate: float
    samples: np.ndarray  # (n, 3) raw LSBs
    scale: float = DEFAULT_SCALE  # m/s^2 per LSB
    start_ts: float = 0.0  # seconds
    position: tuple = (0.0, 0.0)  # stage (x, y) of the wearer, meters

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidInputError("sample rate must be positive")
        s = np.asarray(self.samples)
        if s.ndim != 2 or s.shape[1] != 3:
            raise InvalidInputError(f"expected (n, 3) samples, got {s.shape}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def accel(self) -> np.ndarray:
        return np.asarray(self.samples, dtype=np.float64) * self.scale


@dataclass(frozen=True)
class StepEvent:
    t: float
    sensor_id: int
    intensity: float
    x: float = 0.0
    y: float = 0.0


# -- biquads -------------------------------------------------------------------


@dataclass(frozen=True)
class EqSection:
    kind: str  # "highpass", "lowpass" or "peaking"
    freq: float
    q: float = 1 / math.sqrt(2)
    gain_db: float = 0.0

    def coefficients(self, fs: float) -> np.ndarray:
        """Normalized ``[b0, b1, b2, 1, a1, a2]``."""
        if not 0 < self.freq < fs / 2:
            raise ConfigError(f"{self.kind} frequency {self.freq} Hz outside (0, fs/2)")
        if self.q <= 0:
            raise ConfigError("Q must be positive")
        w0 = 2 * math.pi * self.freq / fs
        cw, sw = math.cos(w0), math.sin(w0)
        alpha = sw / (2 * self.q)
        if self.kind == "lowpass":
            b = [(1 - cw) / 2, 1 - cw, (1 - cw) / 2]
            a = [1 + alpha, -2 * cw, 1 - alpha]
        elif self.kind == "highpass":
            b = [(1 + cw) / 2, -(1 + cw), (1 + cw) / 2]
            a = [1 + alpha, -2 * cw, 1 - alpha]
        elif self.kind == "peaking":
            A = 10 ** (self.gain_db / 40)
            b = [1 + alpha * A, -2 * cw, 1 - alpha * A]
            a = [1 + alpha / A, -2 * cw, 1 - alpha / A]
        else:
            raise ConfigError(f"unknown section type {self.kind!r}")
        return np.array(b + a) / a[0]


def is_stable(sos_row: Sequence[float]) -> bool:
    """Both poles strictly inside the unit circle (stability triangle)."""
    a1, a2 = sos_row[4] / sos_row[3], sos_row[5] / sos_row[3]
    return abs(a2) < 1 and abs(a1) < 1 + a2


@dataclass(frozen=True)
class EqConfig:
    sections: tuple = ()

    def sos(self, fs: float) -> np.ndarray:
        if not self.sections:
            return np.zeros((0, 6))
        sos = np.array([s.coefficients(fs) for s in self.sections])
        for s, row in zip(self.sections, sos):
            if not is_stable(row):
                raise ConfigError(f"unstable section {s}")
        return sos

    @classmethod
    def default(cls) -> "EqConfig":
        return cls((
            EqSection("highpass", 20.0),
            EqSection("peaking", 80.0, 1.0, 6.0),
            EqSection("lowpass", 300.0),
        ))

    @classmethod
    def from_spec(cls, text: str) -> "EqConfig":
        """Parse ``kind:freq[:q[:gain_db]]`` items separated by commas."""
        sections = []
        for item in filter(None, (t.strip() for t in text.split(","))):
            parts = item.split(":")
            kind, freq = parts[0], float(parts[1])
            q = float(parts[2]) if len(parts) > 2 else 1 / math.sqrt(2)
            gain = float(parts[3]) if len(parts) > 3 else 0.0
            sections.append(EqSection(kind, freq, q, gain))
        return cls(tuple(sections))


def cascade_response(sos: np.ndarray, fs: float, freqs) -> np.ndarray:
    """Complex frequency response of a biquad cascade, evaluated analytically."""
    z1 = np.exp(-2j * np.pi * np.asarray(freqs, dtype=np.float64) / fs)
    h = np.ones_like(z1)
    for b0, b1, b2, a0, a1, a2 in sos:
        h *= (b0 + b1 * z1 + b2 * z1 ** 2) / (a0 + a1 * z1 + a2 * z1 ** 2)
    return h


def equalize(x: np.ndarray, eq: EqConfig, fs: float = DEFAULT_RATE) -> np.ndarray:
    """Apply the cascade along axis 0 from rest."""
    x = np.asarray(x, dtype=np.float64)
    sos = eq.sos(fs)
    if len(sos) == 0:
        return x.copy()
    return signal.sosfilt(sos, x, axis=0)


class Equalizer:
    """Streaming form of :func:`equalize`; state carries across blocks."""

    def __init__(self, eq: EqConfig, fs: float = DEFAULT_RATE):
        self.sos = eq.sos(fs)
        self._zi = None

    def process(self, block: np.ndarray) -> np.ndarray:
        block = np.asarray(block, dtype=np.float64)
        if len(self.sos) == 0:
            return block.copy()
        if self._zi is None:
            self._zi = np.zeros((len(self.sos), 2) + block.shape[1:])
        out, self._zi = signal.sosfilt(self.sos, block, axis=0, zi=self._zi)
        return out


# -- envelope and gate -----------------------------------------------------------


def envelope(x: AccelStream, corner_hz: float = ENVELOPE_CORNER_HZ) -> np.ndarray:
    """Low-passed magnitude of the per-axis de-meaned acceleration, clipped at 0."""
    if len(x) == 0:
        raise InvalidInputError("empty accelerometer stream")
    a = x.accel()
    mag = np.linalg.norm(a - a.mean(axis=0), axis=1)
    sos = signal.butter(2, corner_hz, btype="low", fs=x.sample_rate, output="sos")
    return np.maximum(signal.sosfilt(sos, mag), 0.0)


def estimate_period(env: np.ndarray, fs: float, min_cadence: float = 0.5,
                    max_cadence: float = 4.0):
    """Step period from the envelope autocorrelation.

    Returns ``(period_s, strength)`` where strength is the normalized
    autocorrelation at that lag; ``(None, 0.0)`` when nothing is periodic.
    """
    e = env - env.mean()
    n = len(e)
    lo = max(1, int(math.floor(fs / max_cadence)))
    hi = min(n - 1, int(math.ceil(fs / min_cadence)))
    if hi <= lo or not np.any(e):
        return None, 0.0
    nfft = 1 << int(math.ceil(math.log2(2 * n)))
    spec = np.fft.rfft(e, nfft)
    acf = np.fft.irfft(spec * np.conj(spec), nfft)[:n] / n  # biased estimate
    seg = acf[lo:hi + 1]
    best = float(seg.max())
    if best <= 0:
        return None, 0.0
    # multiples of the true period score almost as high; take the shortest lag
    peaks, _ = signal.find_peaks(seg, height=SUBHARMONIC_RATIO * best)
    k = lo + (int(peaks[0]) if peaks.size else int(np.argmax(seg)))
    strength = float(acf[k] / acf[0])
    if lo < k < hi:  # parabolic refinement
        y0, y1, y2 = acf[k - 1], acf[k], acf[k + 1]
        den = y0 - 2 * y1 + y2
        if den < 0:
            return (k + 0.5 * (y0 - y2) / den) / fs, strength
    return k / fs, strength


def gate_window(n: int, fs: float, onsets_s: Sequence[float], attack_s: float = ATTACK_S,
                release_s: float = RELEASE_S) -> np.ndarray:
    """Union of raised-cosine attack/release windows starting at each onset."""
    w = np.zeros(n)
    na = max(1, int(round(attack_s * fs)))
    nr = max(1, int(round(release_s * fs)))
    shape = np.concatenate([
        0.5 - 0.5 * np.cos(np.pi * np.arange(na) / na),
        0.5 + 0.5 * np.cos(np.pi * np.arange(nr) / nr),
    ])
    for t in onsets_s:
        i0 = int(round(t * fs))
        lo, hi = max(i0, 0), min(i0 + shape.size, n)
        if hi > lo:
            w[lo:hi] = np.maximum(w[lo:hi], shape[lo - i0:hi - i0])
    return w


@dataclass
class GateResult:
    events: list
    gated: np.ndarray  # (n, 3) m/s^2, de-meaned, zero outside windows
    window: np.ndarray
    envelope: np.ndarray
    period_s: Optional[float]
    threshold: float


def gait_gate(x: AccelStream, min_cadence: float = 0.5, max_cadence: float = 4.0,
              onset_fraction: float = ONSET_FRACTION, min_periodicity: float = MIN_PERIODICITY,
              relative_floor: float = RELATIVE_FLOOR) -> GateResult:
    """One event per footstep, aligned to the burst onset.

    The step period comes from the envelope autocorrelation; if its
    normalized peak is below ``min_periodicity`` there is no gait and the gate
    stays shut. Envelope peaks above ``median + 3 MAD`` (and at least 3 MAD
    prominent) are accepted tallest first with a refractory period of half
    the step period. Peaks under ``relative_floor`` times the 90th-percentile
    candidate height are noise-floor excursions and are dropped. Each event
    time is found by walking back from its peak to where the envelope last
    sat below ``onset_fraction`` of the peak.
    """
    if not 0 < min_cadence < max_cadence:
        raise ConfigError("need 0 < min_cadence < max_cadence")
    fs = x.sample_rate
    if len(x) < 2 / min_cadence * fs:
        raise InsufficientDataError(
            f"{x.duration:.2f} s of data; at least {2 / min_cadence:.2f} s required")
    env = envelope(x)
    a = x.accel()
    period, strength = estimate_period(env, fs, min_cadence, max_cadence)
    med = float(np.median(env))
    mad = float(np.median(np.abs(env - med)))
    thr = med + 3.0 * mad
    if period is None or strength < min_periodicity:
        return GateResult([], np.zeros_like(a), np.zeros(len(x)), env, period, thr)
    peaks, _ = signal.find_peaks(env, height=thr, prominence=3.0 * mad,
                                 distance=max(1, int(0.5 * period * fs)))
    peaks = peaks[env[peaks] > thr]
    if peaks.size:
        peaks = peaks[env[peaks] >= relative_floor * np.percentile(env[peaks], 90)]
    events = []
    onsets = []
    for p in peaks:
        level = onset_fraction * env[p]
        below = np.nonzero(env[:p] <= level)[0]
        i0 = int(below[-1]) + 1 if below.size else 0
        t = i0 / fs
        onsets.append(t)
        events.append(StepEvent(x.start_ts + t, x.sensor_id, float(env[p]), *x.position))
    win = gate_window(len(x), fs, onsets)
    gated = (a - a.mean(axis=0)) * win[:, None]
    return GateResult(events, gated, win, env, period, thr)


def drive_signal(gated: np.ndarray) -> np.ndarray:
    """Project 3-axis vibration onto its principal axis to get a mono signal."""
    g = np.asarray(gated, dtype=np.float64)
    if g.ndim == 1:
        return g.copy()
    if not np.any(g):
        return np.zeros(len(g))
    _, _, vt = np.linalg.svd(g - g.mean(axis=0), full_matrices=False)
    axis = vt[0] if vt[0][np.argmax(np.abs(vt[0]))] > 0 else -vt[0]
    return g @ axis


# -- synthetic gait ----------------------------------------------------------------


def synth_gait(n_steps: int, cadence: float, fs: float = DEFAULT_RATE, echo_gain: float = 0.6,
               echo_delay: float = 0.05, amplitude: float = 30.0, lead_in: float = 1.0,
               jitter: float = 0.0, noise: float = 0.05, sensor_id: int = 0, seed: int = 0,
               scale: float = DEFAULT_SCALE):
    """Footstep bursts with a delayed echo on top of gravity.

    Returns ``(stream, onsets_s)``; the onsets are the ground truth.
    """
    rng = np.random.default_rng(seed)
    onsets = lead_in + np.arange(n_steps) / cadence
    if jitter:
        onsets = onsets + rng.uniform(-jitter, jitter, n_steps)
    dur = onsets[-1] + 2.0 / cadence + 1.0 if n_steps else lead_in + 4.0 / cadence
    n = int(round(dur * fs))
    t = np.arange(n) / fs
    a = np.zeros((n, 3))
    a[:, 2] = 9.80665
    dirs = np.array([0.3, 0.2, 0.93])
    dirs /= np.linalg.norm(dirs)

    def burst(t0, gain):
        tau = t - t0
        on = tau >= 0
        b = np.zeros(n)
        tt = tau[on]
        b[on] = gain * np.exp(-tt / 0.015) * (np.sin(2 * np.pi * 70 * tt) + 0.5 * np.sin(2 * np.pi * 160 * tt))
        return b

    for t0 in onsets:
        s = burst(t0, amplitude) + (burst(t0 + echo_delay, amplitude * echo_gain) if echo_gain else 0)
        a += s[:, None] * dirs
    a += rng.normal(0, noise, a.shape)
    raw = np.clip(np.rint(a / scale), -32768, 32767).astype(np.int16)
    return AccelStream(sensor_id, fs, raw, scale), onsets


# -- files ---------------------------------------------------------------------------


def read_wav(path, sensor_id: int = 0, scale: float = DEFAULT_SCALE) -> AccelStream:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise InvalidInputError("expected 16-bit PCM")
        ch = w.getnchannels()
        if ch != 3:
            raise InvalidInputError(f"expected 3 channels (x, y, z), got {ch}")
        rate = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2").reshape(-1, 3)
    return AccelStream(sensor_id, rate, data.astype(np.int16), scale)


def write_wav(path, samples: np.ndarray, rate: int) -> None:
    s = np.asarray(samples)
    if s.ndim == 1:
        s = s[:, None]
    with wave.open(str(path), "wb") as w:
        w.setnchannels(s.shape[1])
        w.setsampwidth(2)
        w.setframerate(int(rate))
        w.writeframes(np.ascontiguousarray(s, dtype="<i2").tobytes())


def to_pcm16(x: np.ndarray, peak: Optional[float] = None) -> np.ndarray:
    """Normalize a float signal to int16 full scale (peak maps to 32767)."""
    x = np.asarray(x, dtype=np.float64)
    peak = peak or float(np.max(np.abs(x))) or 1.0
    return np.clip(np.rint(x / peak * 32767), -32768, 32767).astype(np.int16)


def write_events_csv(path, events: Sequence[StepEvent]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "sensor_id", "intensity", "x", "y"])
        for e in events:
            w.writerow([f"{e.t:.6f}", e.sensor_id, f"{e.intensity:.6g}", f"{e.x:.4f}", f"{e.y:.4f}"])


def read_events_csv(path) -> list[StepEvent]:
    with open(path, newline="") as f:
        return [StepEvent(float(r["t"]), int(r["sensor_id"]), float(r["intensity"]),
                          float(r["x"]), float(r["y"])) for r in csv.DictReader(f)]
