"""Propagation-aware vibration floor: panel grid, actuator planning, step mapping.

Vibration loses ``alpha`` dB per panel hop away from the nearest actuator.
Diagonal neighbours count as one hop under 8-connectivity (the offset
plywood layers couple panels across corners); 4-connectivity counts
Manhattan hops.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InfeasibleBudgetError, InvalidInputError
from .haptics import StepEvent

DEFAULT_PITCH = 0.6
DEFAULT_ALPHA = 6.0
DEFAULT_RADIUS = 1.5


def hop_distance(a, b, connectivity: int = 8):
    """Hop count between panels ``(row, col)``; broadcasts over arrays."""
    dr = np.abs(np.asarray(a[0]) - np.asarray(b[0]))
    dc = np.abs(np.asarray(a[1]) - np.asarray(b[1]))
    if connectivity == 8:
        return np.maximum(dr, dc)
    if connectivity == 4:
        return dr + dc
    raise ConfigError("connectivity must be 4 or 8")


@dataclass(frozen=True)
class FloorPlan:
    rows: int
    cols: int
    actuators: tuple  # ((row, col), ...) in channel order
    alpha: float = DEFAULT_ALPHA
    pitch: float = DEFAULT_PITCH
    connectivity: int = 8

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("grid must have at least one panel")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity must be 4 or 8")
        if not self.actuators:
            raise ConfigError("plan needs at least one actuator")
        if len(set(self.actuators)) != len(self.actuators):
            raise ConfigError("duplicate actuator panel")
        for r, c in self.actuators:
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise ConfigError(f"actuator ({r}, {c}) outside grid")

    @property
    def n_panels(self) -> int:
        return self.rows * self.cols

    @property
    def extent(self):
        """Floor size (x along cols, y along rows) in meters."""
        return self.cols * self.pitch, self.rows * self.pitch

    def hop_map(self) -> np.ndarray:
        """Hops from every panel to its nearest actuator, shape (rows, cols)."""
        rr, cc = np.mgrid[0:self.rows, 0:self.cols]
        act = np.array(self.actuators)
        d = hop_distance((rr[..., None], cc[..., None]), (act[:, 0], act[:, 1]), self.connectivity)
        return d.min(axis=-1)

    def attenuation_map(self) -> np.ndarray:
        return self.alpha * self.hop_map()

    @property
    def max_attenuation(self) -> float:
        return float(self.attenuation_map().max())

    def actuator_xy(self) -> np.ndarray:
        """Panel-center coordinates (x, y) of every actuator in meters."""
        act = np.array(self.actuators, dtype=np.float64)
        return np.column_stack([(act[:, 1] + 0.5) * self.pitch, (act[:, 0] + 0.5) * self.pitch])


def attenuation(plan: FloorPlan, panel) -> float:
    r, c = panel
    if not (0 <= r < plan.rows and 0 <= c < plan.cols):
        raise InvalidInputError(f"panel {panel} outside grid")
    act = np.array(plan.actuators)
    hops = hop_distance((r, c), (act[:, 0], act[:, 1]), plan.connectivity).min()
    return float(plan.alpha * hops)


def db_to_gain(db: float) -> float:
    return 10.0 ** (-db / 20.0)


def covering_lower_bound(rows: int, cols: int, hops: int, connectivity: int = 8) -> int:
    """Fewest actuators that could put every panel within ``hops``.

    Exact for 8-connectivity (square neighbourhoods tile the grid per axis);
    an area bound for the diamond neighbourhoods of 4-connectivity.
    """
    if connectivity == 8:
        side = 2 * hops + 1
        return math.ceil(rows / side) * math.ceil(cols / side)
    ball = 2 * hops * hops + 2 * hops + 1
    return math.ceil(rows * cols / ball)


def greedy_placement(rows: int, cols: int, budget: int, connectivity: int = 8) -> list:
    """Place actuators one at a time.

    Each step takes the panel that minimizes the resulting maximum hop
    distance. Ties go to the smallest total hop distance (most newly covered
    area), then to the lowest local actuator density (a Gaussian kernel of
    two panels over the actuators already placed, normalized by the kernel
    mass inside the grid), then row-major order.
    """
    n = rows * cols
    rr, cc = np.divmod(np.arange(n), cols)
    hops = hop_distance((rr[:, None], cc[:, None]), (rr[None, :], cc[None, :]), connectivity)
    kernel = np.exp(-((rr[:, None] - rr[None, :]) ** 2 + (cc[:, None] - cc[None, :]) ** 2) / 8.0)
    mass = kernel.sum(axis=1)  # edge panels see less of the kernel
    big = np.iinfo(np.int64).max // 4
    best = np.full(n, big, dtype=np.int64)
    density = np.zeros(n)
    chosen = []
    free = np.ones(n, dtype=bool)
    for _ in range(min(budget, n)):
        cand = np.minimum(best[None, :], hops)  # row i: hops if panel i is added
        worst = np.where(free, cand.max(axis=1), big)
        total = np.where(free, cand.sum(axis=1), big)
        order = np.lexsort((np.arange(n), np.round(density / mass, 9), total, worst))
        i = int(order[0])
        chosen.append((int(rr[i]), int(cc[i])))
        free[i] = False
        best = cand[i]
        density += kernel[i]
    return chosen


def plan_actuators(rows: int, cols: int, budget: int, alpha: float = DEFAULT_ALPHA,
                   max_db: Optional[float] = None, connectivity: int = 8,
                   pitch: float = DEFAULT_PITCH) -> FloorPlan:
    """Greedy actuator plan using the whole budget.

    Raises :class:`InfeasibleBudgetError` when the plan misses ``max_db``;
    ``lower_bound`` on the error is set when the covering bound proves no
    placement of that size could succeed.
    """
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    if max_db is not None and not max_db > 0:
        raise ConfigError("max_db must be positive")
    plan = FloorPlan(rows, cols, tuple(greedy_placement(rows, cols, budget, connectivity)),
                     alpha, pitch, connectivity)
    if max_db is not None:
        achieved = plan.max_attenuation
        hops = int(math.floor(max_db / alpha + 1e-9))
        bound = covering_lower_bound(rows, cols, hops, connectivity)
        if budget < bound:
            raise InfeasibleBudgetError(
                f"{rows}x{cols} needs at least {bound} actuators for {max_db} dB "
                f"({hops} hops); budget is {budget}", achieved, bound)
        if achieved > max_db + 1e-9:
            raise InfeasibleBudgetError(
                f"greedy plan reaches {achieved} dB, above the {max_db} dB target", achieved)
    return plan


# -- step mapping -----------------------------------------------------------------


@dataclass(frozen=True)
class ActuatorCommand:
    channel: int
    gain: float
    waveform_id: str
    t: float


@dataclass(frozen=True)
class StageToFloor:
    """Affine map from stage (x, y) meters to floor coordinates."""

    scale: float = 1.0
    offset: tuple = (0.0, 0.0)

    def apply(self, x: float, y: float):
        return self.scale * x + self.offset[0], self.scale * y + self.offset[1]


def map_step(ev: StepEvent, plan: FloorPlan, pattern: str = "floor_wide",
             radius: float = DEFAULT_RADIUS, transform: StageToFloor = StageToFloor(),
             waveform_id: Optional[str] = None) -> list[ActuatorCommand]:
    waveform_id = waveform_id or f"sensor{ev.sensor_id}"
    if pattern == "floor_wide":
        return [ActuatorCommand(ch, 1.0, waveform_id, ev.t) for ch in range(len(plan.actuators))]
    if pattern != "localized":
        raise ConfigError(f"unknown pattern {pattern!r}")
    if radius <= 0:
        raise ConfigError("radius must be positive")
    x, y = transform.apply(ev.x, ev.y)
    w, h = plan.extent
    if not (0 <= x <= w and 0 <= y <= h):
        raise InvalidInputError(f"step at ({x:.2f}, {y:.2f}) m lies outside the {w:.1f}x{h:.1f} m floor")
    d = np.hypot(*(plan.actuator_xy() - np.array([x, y])).T)
    gains = np.maximum(0.0, 1.0 - d / radius)
    return [ActuatorCommand(int(ch), float(gains[ch]), waveform_id, ev.t)
            for ch in np.nonzero(gains > 0)[0]]


# -- files ---------------------------------------------------------------------------


def format_plan(plan: FloorPlan) -> str:
    grid = [["."] * plan.cols for _ in range(plan.rows)]
    for r, c in plan.actuators:
        grid[r][c] = "A"
    header = f"# pitch={plan.pitch} alpha={plan.alpha} connectivity={plan.connectivity}"
    return "\n".join([header] + ["".join(row) for row in grid]) + "\n"


def parse_plan(text: str) -> FloorPlan:
    """Actuator channels are numbered in row-major order of the grid."""
    meta = {"pitch": DEFAULT_PITCH, "alpha": DEFAULT_ALPHA, "connectivity": 8}
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key in meta:
                    meta[key] = float(val) if key != "connectivity" else int(val)
            continue
        if set(line) - {".", "A"}:
            raise ConfigError(f"unexpected characters in plan row {line!r}")
        rows.append(line)
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigError("plan grid must be a non-empty rectangle")
    act = tuple((r, c) for r, row in enumerate(rows) for c, ch in enumerate(row) if ch == "A")
    return FloorPlan(len(rows), len(rows[0]), act, meta["alpha"], meta["pitch"], meta["connectivity"])


def save_plan(path, plan: FloorPlan) -> None:
    Path(path).write_text(format_plan(plan))


def load_plan(path) -> FloorPlan:
    return parse_plan(Path(path).read_text())


def write_commands_csv(path, commands: Sequence[ActuatorCommand]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "channel", "gain", "waveform_id"])
        for c in commands:
            w.writerow([f"{c.t:.6f}", c.channel, f"{c.gain:.6f}", c.waveform_id])
