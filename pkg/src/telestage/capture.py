"""Synthetic multi-unit RGB-D capture.

Scenes are analytic (planes, boxes, moving spheres) and ray-cast per camera
pixel, which gives exact ground truth for depth, coverage and motion masks.
LiDAR returns are modeled directly on the camera raster: each frame keeps a
phase-dependent random subset of pixels and perturbs their depth, which is
what makes static regions flicker between frames.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError
from .geometry import Intrinsics, Pose, UnitCalibration, pixel_rays

INVALID_DEPTH = 65535
MAX_DEPTH_MM = 65534


@dataclass(eq=False)
class RgbdFrame:
    unit_id: int
    seq: int
    capture_ts: int  # microseconds on the shared clock
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) uint16, mm, 0 = no return

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape or self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise InvalidInputError(
                f"rgb {self.rgb.shape} and depth {self.depth.shape} rasters disagree")
        if self.rgb.dtype != np.uint8 or self.depth.dtype != np.uint16:
            raise InvalidInputError("rgb must be uint8 and depth uint16")

    @property
    def shape(self):
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return (self.depth > 0) & (self.depth != INVALID_DEPTH)

    def depth_m(self) -> np.ndarray:
        d = self.depth.astype(np.float64) / 1000.0
        d[~self.valid] = 0.0
        return d

    def replace(self, **changes) -> "RgbdFrame":
        fields = dict(unit_id=self.unit_id, seq=self.seq, capture_ts=self.capture_ts,
                      rgb=self.rgb, depth=self.depth)
        fields.update(changes)
        return RgbdFrame(**fields)


# -- sweep schedule ----------------------------------------------------------


@dataclass(frozen=True)
class SweepSchedule:
    n_lidars: int = 3
    base_rate: float = 10.0
    phase_offsets: tuple = (0.0, 120.0, 240.0)

    def __post_init__(self):
        if self.n_lidars < 1 or self.base_rate <= 0:
            raise ConfigError("need at least one LiDAR and a positive rate")
        if len(self.phase_offsets) != self.n_lidars:
            raise ConfigError("one phase offset per LiDAR required")
        ph = list(self.phase_offsets)
        if any(b <= a for a, b in zip(ph, ph[1:])):
            raise ConfigError("phase offsets must be strictly increasing")
        if ph[-1] - ph[0] >= 360.0:
            raise ConfigError("phase offsets must span less than 360 degrees")

    @classmethod
    def evenly_staggered(cls, n_lidars: int, base_rate: float) -> "SweepSchedule":
        return cls(n_lidars, base_rate, tuple(360.0 * k / n_lidars for k in range(n_lidars)))

    @property
    def frame_rate(self) -> float:
        return self.n_lidars * self.base_rate

    @property
    def revisit_interval_ms(self) -> float:
        return 1000.0 / (self.n_lidars * self.base_rate)


@dataclass(frozen=True)
class SweepPhase:
    frame: int
    lidar: int
    timestamp: float  # seconds, camera trigger for this sweep
    column_times: Optional[np.ndarray] = None  # seconds, per raster column


def schedule_sweeps(sched: SweepSchedule, frame_rate: float, n_frames: int,
                    intr: Optional[Intrinsics] = None) -> list[SweepPhase]:
    """Assign every output frame to the LiDAR whose sweep triggers it.

    LiDAR ``l`` passes the camera's center azimuth at
    ``(k + phase_l / 360) / base_rate`` for rotation ``k``. Columns away from
    the center are swept earlier or later by their azimuth offset.
    """
    if abs(frame_rate - sched.frame_rate) > 1e-6 * sched.frame_rate:
        raise ConfigError(
            f"frame rate {frame_rate} Hz inconsistent with {sched.n_lidars} LiDARs at "
            f"{sched.base_rate} Hz")
    period = 1.0 / sched.base_rate
    col_offsets = None
    if intr is not None:
        az = np.arctan((np.arange(intr.width) - intr.cx) / intr.fx)
        col_offsets = az / (2 * math.pi) * period
    phases = []
    for k in range(n_frames):
        rot, lidar = divmod(k, sched.n_lidars)
        ts = (rot + (sched.phase_offsets[lidar] - sched.phase_offsets[0]) / 360.0) * period
        cols = None if col_offsets is None else ts + col_offsets
        phases.append(SweepPhase(k, lidar, ts, cols))
    return phases


# -- scene -------------------------------------------------------------------


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    color: tuple = (128, 128, 128)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    color: tuple = (160, 120, 80)


@dataclass(frozen=True)
class LinearPath:
    start: tuple
    velocity: tuple = (0.0, 0.0, 0.0)

    def at(self, t: float) -> np.ndarray:
        return np.asarray(self.start, float) + t * np.asarray(self.velocity, float)


@dataclass(frozen=True)
class CircularPath:
    center: tuple
    radius: float
    angular_speed: float  # rad/s
    phase: float = 0.0

    def at(self, t: float) -> np.ndarray:
        a = self.phase + self.angular_speed * t
        c = np.asarray(self.center, float)
        return c + self.radius * np.array([math.cos(a), math.sin(a), 0.0])


@dataclass(frozen=True)
class Sphere:
    radius: float
    path: object
    color: tuple = (200, 60, 60)
    texture: float = 0.0  # checker modulation depth, 0 = flat


@dataclass(frozen=True)
class SceneConfig:
    extents: tuple = (6.5, 6.5, 4.6)
    planes: tuple = ()
    boxes: tuple = ()
    spheres: tuple = ()
    seed: int = 0
    duration: float = float("inf")
    light_offset_per_s: float = 0.0
    light_gain_per_s: float = 0.0

    def __post_init__(self):
        if len(self.extents) != 3 or min(self.extents) <= 0:
            raise ConfigError("room extents must be three positive lengths")

    @property
    def static_only(self) -> "SceneConfig":
        return SceneConfig(self.extents, self.planes, self.boxes, (), self.seed, self.duration)


def _path_from_dict(d):
    kind = d.get("type", "linear")
    if kind == "linear":
        return LinearPath(tuple(d["start"]), tuple(d.get("velocity", (0, 0, 0))))
    if kind == "circular":
        return CircularPath(tuple(d["center"]), float(d["radius"]), float(d["angular_speed"]),
                            float(d.get("phase", 0.0)))
    raise ConfigError(f"unknown path type {kind!r}")


def scene_from_dict(d: dict) -> SceneConfig:
    try:
        return SceneConfig(
            extents=tuple(d.get("extents", (6.5, 6.5, 4.6))),
            planes=tuple(Plane(tuple(p["point"]), tuple(p["normal"]), tuple(p.get("color", (128,) * 3)))
                         for p in d.get("planes", ())),
            boxes=tuple(Box(tuple(b["lo"]), tuple(b["hi"]), tuple(b.get("color", (160, 120, 80))))
                        for b in d.get("boxes", ())),
            spheres=tuple(Sphere(float(s["radius"]), _path_from_dict(s["path"]),
                                 tuple(s.get("color", (200, 60, 60))), float(s.get("texture", 0.0)))
                          for s in d.get("spheres", ())),
            seed=int(d.get("seed", 0)),
            duration=float(d.get("duration", float("inf"))),
            light_offset_per_s=float(d.get("light_offset_per_s", 0.0)),
            light_gain_per_s=float(d.get("light_gain_per_s", 0.0)),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed scene config: {exc}") from None


def load_scene(path) -> SceneConfig:
    return scene_from_dict(json.loads(Path(path).read_text()))


def default_scene(seed: int = 0) -> SceneConfig:
    """A 6.5 m stage with floor, back wall, two props and two moving performers."""
    return SceneConfig(
        extents=(6.5, 6.5, 4.6),
        planes=(
            Plane((0, 0, 0), (0, 0, 1), (90, 90, 100)),
            Plane((0, 3.25, 0), (0, -1, 0), (60, 70, 120)),
        ),
        boxes=(
            Box((-2.5, 1.5, 0.0), (-1.7, 2.3, 0.9), (170, 130, 70)),
            Box((1.6, 1.2, 0.0), (2.4, 2.0, 1.2), (120, 160, 90)),
        ),
        spheres=(
            Sphere(0.35, CircularPath((0.0, 0.0, 1.0), 1.2, 1.2), (220, 70, 60), 0.4),
            Sphere(0.30, CircularPath((0.0, 0.2, 0.9), 0.7, -1.8, 1.5), (70, 200, 220), 0.4),
        ),
        seed=seed,
    )


# -- ray casting ---------------------------------------------------------------


def _world_rays(cal: UnitCalibration):
    """World-frame ray directions whose camera-z component is 1 (so t = depth)."""
    rays = pixel_rays(cal.intrinsics)
    return rays @ cal.pose.rotation.T


def _hit_plane(origin, dirs, plane: Plane):
    n = np.asarray(plane.normal, float)
    n = n / np.linalg.norm(n)
    denom = dirs @ n
    num = (np.asarray(plane.point, float) - origin) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    t[~np.isfinite(t) | (t <= 0)] = np.inf
    return t


def _hit_box(origin, dirs, box: Box):
    lo = np.asarray(box.lo, float)
    hi = np.asarray(box.hi, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit, t, np.inf)


def _hit_sphere(origin, dirs, center, radius):
    oc = origin - center
    a = np.einsum("...i,...i->...", dirs, dirs)
    b = 2.0 * (dirs @ oc)
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        sq = np.sqrt(disc)
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 0, t0, t1)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


class SceneRenderer:
    """Ray-caster bound to one unit; caches the static layer across frames."""

    def __init__(self, scene: SceneConfig, cal: UnitCalibration):
        self.scene = scene
        self.cal = cal
        self._dirs = _world_rays(cal)
        self._origin = cal.center
        h, w = cal.intrinsics.height, cal.intrinsics.width
        t = np.full((h, w), np.inf)
        color = np.zeros((h, w, 3))
        for obj in scene.planes:
            self._merge(t, color, _hit_plane(self._origin, self._dirs, obj), obj.color)
        for obj in scene.boxes:
            self._merge(t, color, _hit_box(self._origin, self._dirs, obj), obj.color)
        self._static_t = t
        self._static_color = color

    @staticmethod
    def _merge(t, color, t_new, c):
        closer = t_new < t
        t[closer] = t_new[closer]
        color[closer] = c

    def _sphere_window(self, center, radius):
        """Pixel bounding box that can contain the sphere's silhouette, or None."""
        k = self.cal.intrinsics
        pc = self.cal.pose.apply_inverse(np.asarray(center, float))
        dist = float(np.linalg.norm(pc))
        if dist <= radius * 1.001 or pc[2] <= -radius:
            return 0, k.height, 0, k.width
        if pc[2] - radius <= 1e-6:
            return 0, k.height, 0, k.width
        # bound the silhouette with the cube around the sphere, projected at nearest depth
        zn = pc[2] - radius
        xs = [(pc[0] - radius) / zn, (pc[0] + radius) / zn, (pc[0] - radius) / (pc[2] + radius),
              (pc[0] + radius) / (pc[2] + radius)]
        ys = [(pc[1] - radius) / zn, (pc[1] + radius) / zn, (pc[1] - radius) / (pc[2] + radius),
              (pc[1] + radius) / (pc[2] + radius)]
        u0 = int(math.floor(k.fx * min(xs) + k.cx)) - 1
        u1 = int(math.ceil(k.fx * max(xs) + k.cx)) + 2
        v0 = int(math.floor(k.fy * min(ys) + k.cy)) - 1
        v1 = int(math.ceil(k.fy * max(ys) + k.cy)) + 2
        u0, v0 = max(u0, 0), max(v0, 0)
        u1, v1 = min(u1, k.width), min(v1, k.height)
        if u0 >= u1 or v0 >= v1:
            return None
        return v0, v1, u0, u1

    def render(self, t_s: float, seq: int = 0, capture_ts: Optional[int] = None,
               return_mask: bool = False):
        if t_s > self.scene.duration:
            raise InvalidInputError(f"t={t_s} beyond scene duration")
        t = self._static_t.copy()
        color = self._static_color.copy()
        moving = np.zeros(t.shape, dtype=bool)
        for sph in self.scene.spheres:
            center = sph.path.at(t_s)
            win = self._sphere_window(center, sph.radius)
            if win is None:
                continue
            v0, v1, u0, u1 = win
            dirs = self._dirs[v0:v1, u0:u1]
            th = _hit_sphere(self._origin, dirs, center, sph.radius)
            tw = t[v0:v1, u0:u1]
            closer = th < tw
            if not closer.any():
                continue
            tw[closer] = th[closer]
            c = np.broadcast_to(np.asarray(sph.color, float), (int(closer.sum()), 3))
            if sph.texture:
                hit = self._origin + dirs[closer] * th[closer][:, None] - center
                lon = np.arctan2(hit[:, 1], hit[:, 0])
                lat = np.arcsin(np.clip(hit[:, 2] / sph.radius, -1, 1))
                checker = (np.floor(lon * 8 / math.pi) + np.floor(lat * 8 / math.pi)) % 2
                c = c * (1.0 - sph.texture * checker)[:, None]
            color[v0:v1, u0:u1][closer] = c
            moving[v0:v1, u0:u1] |= closer
        depth_mm = np.where(np.isfinite(t), np.rint(t * 1000.0), 0)
        depth_mm[depth_mm > MAX_DEPTH_MM] = 0
        gain = 1.0 + self.scene.light_gain_per_s * t_s
        offset = self.scene.light_offset_per_s * t_s
        if gain != 1.0 or offset != 0.0:
            color = color * gain + offset
        rgb = np.clip(np.rint(color), 0, 255).astype(np.uint8)
        if capture_ts is None:
            capture_ts = int(round(t_s * 1e6))
        frame = RgbdFrame(self.cal.unit_id, seq, capture_ts, rgb, depth_mm.astype(np.uint16))
        return (frame, moving) if return_mask else frame


def render_ground_truth(scene: SceneConfig, cal: UnitCalibration, t: float,
                        seq: int = 0) -> RgbdFrame:
    return SceneRenderer(scene, cal).render(t, seq)


def sample_unit(ground_truth: RgbdFrame, phase: Optional[SweepPhase] = None,
                noise_sigma: float = 0.01, dropout: float = 0.5, seed: int = 0) -> RgbdFrame:
    """Simulate displaced-LiDAR sampling of a ground-truth frame.

    Each pixel survives with probability ``1 - dropout`` under a pattern that
    depends on (seed, unit, seq, LiDAR); survivors get Gaussian depth noise.
    """
    if not 0 <= dropout < 1:
        raise InvalidInputError("dropout must lie in [0, 1)")
    if noise_sigma < 0:
        raise InvalidInputError("noise_sigma must be non-negative")
    lidar = phase.lidar if phase is not None else 0
    rng = np.random.default_rng([seed, ground_truth.unit_id, ground_truth.seq, lidar])
    depth = ground_truth.depth
    valid = ground_truth.valid
    if dropout > 0:
        valid = valid & (rng.random(depth.shape) >= dropout)
    out = np.zeros(depth.shape, dtype=np.uint16)
    if noise_sigma > 0:
        noisy = depth[valid] + rng.normal(0.0, noise_sigma * 1000.0, int(valid.sum()))
        out[valid] = np.clip(np.rint(noisy), 1, MAX_DEPTH_MM).astype(np.uint16)
    else:
        out[valid] = depth[valid]
    return ground_truth.replace(depth=out)


# -- standard rigs -----------------------------------------------------------


def ring_rig(n_units: int, width: int = 320, height: int = 240, hfov_deg: float = 70.0,
             radius: float = 4.5, height_m: float = 2.0, span_deg: float = 90.0,
             target=(0.0, 0.0, 1.0)) -> list[UnitCalibration]:
    """Units on an arc in front of the stage (negative y), all aimed at ``target``."""
    intr = Intrinsics.from_fov(width, height, hfov_deg)
    cals = []
    for k in range(n_units):
        frac = 0.5 if n_units == 1 else k / (n_units - 1)
        ang = math.radians(-90.0 - span_deg / 2 + span_deg * frac)
        eye = (radius * math.cos(ang), radius * math.sin(ang), height_m)
        cals.append(UnitCalibration(k, intr, Pose.look_at(eye, target)))
    return cals


# -- frame files -------------------------------------------------------------

_FRAME_RE = re.compile(r"unit(\d+)_(\d+)\.npz$")


def frame_path(directory, unit_id: int, seq: int) -> Path:
    return Path(directory) / f"unit{unit_id:02d}_{seq:06d}.npz"


def save_frame(directory, frame: RgbdFrame) -> Path:
    path = frame_path(directory, frame.unit_id, frame.seq)
    np.savez_compressed(path, rgb=frame.rgb, depth=frame.depth,
                        meta=np.array([frame.unit_id, frame.seq, frame.capture_ts], dtype=np.int64))
    return path


def load_frame(path) -> RgbdFrame:
    with np.load(path) as z:
        unit_id, seq, ts = (int(x) for x in z["meta"])
        return RgbdFrame(unit_id, seq, ts, z["rgb"], z["depth"])


def list_frames(directory) -> list[Path]:
    """Frame files sorted by (seq, unit)."""
    found = []
    for p in Path(directory).iterdir():
        m = _FRAME_RE.search(p.name)
        if m:
            found.append((int(m.group(2)), int(m.group(1)), p))
    return [p for _, _, p in sorted(found)]


def simulate(scene: SceneConfig, cals: Sequence[UnitCalibration], n_frames: int,
             sched: Optional[SweepSchedule] = None, dropout: float = 0.5,
             noise_sigma: float = 0.01):
    """Yield sampled frames for every unit, frame-major."""
    sched = sched or SweepSchedule()
    phases = schedule_sweeps(sched, sched.frame_rate, n_frames)
    renderers = [SceneRenderer(scene, cal) for cal in cals]
    for ph in phases:
        for r in renderers:
            gt = r.render(ph.timestamp, seq=ph.frame)
            yield sample_unit(gt, ph, noise_sigma, dropout, scene.seed)
