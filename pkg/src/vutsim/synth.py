"""Synthetic car-following and intersection scenes for desk-scale training and testing.

The VUT is driven by the lattice planner under a (jittered) reference key,
replanning every second. Background agents follow analytic paths under
simple longitudinal controllers; in the intersection the crossing agent
decides between going first and yielding from the VUT's actual arrival time
at the conflict point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import PlannerConfig
from .cost import REFERENCE_KEY, CostWeights
from .planner import plan_from_state
from .scenario import (DT, ConfigError, ConflictPoint, CrosswalkPolygon, LanePolyline, Scenario,
                       STATE_FIELDS, wrap_angle)

KINDS = ("car_following", "intersection")
ACCEL_MIN, ACCEL_MAX = -8.0, 4.0
LANE_WIDTH = 3.5
WAYPOINT_SPACING = 2.5


@dataclass(frozen=True)
class SynthParams:
    duration_steps: int = 200
    n_ambient: Optional[int] = None      # None: seeded draw (1-8 car-following, 1-3 intersection)
    vut_speed: Optional[float] = None    # None: seeded draw in [0.4, 0.8] x speed limit
    initial_gap: Optional[float] = None  # car-following gap behind the VUT, meters
    speed_limit: float = 13.9
    key: Optional[CostWeights] = None    # VUT driving key; None: jittered reference key
    key_jitter: float = 0.1
    planner: PlannerConfig = field(default_factory=PlannerConfig)

    def validate(self) -> None:
        if not (1 <= self.duration_steps <= 100_000):
            raise ConfigError("duration_steps must be in [1, 100000]")
        if self.n_ambient is not None and not (0 <= self.n_ambient <= 8):
            raise ConfigError("n_ambient must be in [0, 8]")
        if self.vut_speed is not None and not (0.0 <= self.vut_speed <= 30.0):
            raise ConfigError("vut_speed must be in [0, 30] m/s")
        if self.initial_gap is not None and not self.initial_gap > 0:
            raise ConfigError("initial_gap must be > 0")
        if not (0.0 < self.speed_limit <= 30.0):
            raise ConfigError("speed_limit must be in (0, 30] m/s")
        if not (0.0 <= self.key_jitter <= 1.0):
            raise ConfigError("key_jitter must be in [0, 1]")


class Path:
    """Analytic path made of straight and circular pieces, parametrized by arc length."""

    def __init__(self, start, heading: float):
        self.start = np.asarray(start, dtype=float)
        self.heading0 = float(heading)
        self.pieces = []   # (s_start, length, kind, data)
        self.length = 0.0
        self._end = self.start.copy()
        self._end_heading = self.heading0

    def line(self, length: float) -> "Path":
        self.pieces.append((self.length, length, "line", (self._end.copy(), self._end_heading)))
        self._end = self._end + length * np.array([math.cos(self._end_heading), math.sin(self._end_heading)])
        self.length += length
        return self

    def arc(self, radius: float, angle: float) -> "Path":
        """Turn by ``angle`` (positive = left) on a circle of ``radius``."""
        sign = 1.0 if angle > 0 else -1.0
        h = self._end_heading
        center = self._end + sign * radius * np.array([-math.sin(h), math.cos(h)])
        length = radius * abs(angle)
        self.pieces.append((self.length, length, "arc", (center, radius, h, sign)))
        self._end_heading = h + angle
        self._end = center - sign * radius * np.array([-math.sin(self._end_heading), math.cos(self._end_heading)])
        self.length += length
        return self

    def point(self, s: float):
        if s >= self.length:
            p, h = self._end, self._end_heading
            return p + (s - self.length) * np.array([math.cos(h), math.sin(h)]), float(wrap_angle(h))
        if s < 0:
            h = self.heading0
            return self.start + s * np.array([math.cos(h), math.sin(h)]), float(wrap_angle(h))
        for s0, length, kind, data in self.pieces:
            if s <= s0 + length:
                u = s - s0
                if kind == "line":
                    p0, h = data
                    return p0 + u * np.array([math.cos(h), math.sin(h)]), float(wrap_angle(h))
                center, radius, h0, sign = data
                h = h0 + sign * u / radius
                p = center - sign * radius * np.array([-math.sin(h), math.cos(h)])
                return p, float(wrap_angle(h))
        raise AssertionError("unreachable")

    def lane(self, speed_limit: float, signal_fn=None) -> LanePolyline:
        n = max(2, int(math.floor(self.length / WAYPOINT_SPACING)) + 1)
        rows = []
        for s in np.linspace(0.0, self.length, n):
            p, h = self.point(float(s))
            nrm = np.array([-math.sin(h), math.cos(h)]) * (LANE_WIDTH / 2)
            sig = signal_fn(p) if signal_fn else 0
            rows.append([p[0], p[1], *(p + nrm), *(p - nrm), h, speed_limit, sig])
        return LanePolyline(np.array(rows))


class _PathAgent:
    def __init__(self, path: Path, s: float, v: float, length: float, width: float):
        self.path, self.s, self.v = path, s, v
        self.length, self.width = length, width
        self.rows = []
        self.record()

    def record(self) -> None:
        p, h = self.path.point(self.s)
        self.rows.append([p[0], p[1], h, self.v * math.cos(h), self.v * math.sin(h), self.length, self.width, 1.0])

    def step(self, accel: float) -> None:
        a = float(np.clip(accel, ACCEL_MIN, ACCEL_MAX))
        self.v = max(0.0, self.v + a * DT)
        self.s += self.v * DT
        self.record()


def _follow_accel(gap: float, v: float, v_lead: float, time_gap: float, standstill: float = 4.0) -> float:
    """Constant time-gap car-following law."""
    desired = standstill + time_gap * v
    return 0.3 * (gap - desired) + 0.6 * (v_lead - v)


def _free_accel(v: float, v_des: float) -> float:
    return 0.5 * (v_des - v)


def _drive_vut(x, y, heading, speed, lanes, key, params: SynthParams) -> np.ndarray:
    rows = [[x, y, heading, speed * math.cos(heading), speed * math.sin(heading), 4.8, 1.9, 1.0]]
    while len(rows) < params.duration_steps:
        plan = plan_from_state(x, y, heading, speed, lanes, key, params.planner)
        for st in plan.states[:10]:
            if len(rows) >= params.duration_steps:
                break
            px, py, ph, pv = (float(v) for v in st)
            rows.append([px, py, ph, pv * math.cos(ph), pv * math.sin(ph), 4.8, 1.9, 1.0])
        x, y, heading, speed = rows[-1][0], rows[-1][1], rows[-1][2], math.hypot(rows[-1][3], rows[-1][4])
    return np.array(rows)


def _driver_key(params: SynthParams, rng) -> CostWeights:
    if params.key is not None:
        return params.key
    jitter = np.exp(params.key_jitter * rng.standard_normal(len(REFERENCE_KEY.w)))
    return CostWeights(REFERENCE_KEY.w * jitter)


def _car_following(seed: int, params: SynthParams) -> Scenario:
    rng = np.random.default_rng(seed)
    limit = params.speed_limit
    n_amb = params.n_ambient if params.n_ambient is not None else int(rng.integers(1, 9))
    v0 = params.vut_speed if params.vut_speed is not None else float(rng.uniform(0.4, 0.8) * limit)
    gap0 = params.initial_gap if params.initial_gap is not None else float(rng.uniform(10.0, 25.0))
    key = _driver_key(params, rng)

    paths = [Path((-200.0, 0.0), 0.0).line(800.0), Path((-200.0, LANE_WIDTH), 0.0).line(800.0)]
    lanes = tuple(p.lane(limit) for p in paths)
    vut = _drive_vut(0.0, 0.0, 0.0, v0, lanes, key, params)
    vut_s = vut[:, 0] + 200.0
    vut_v = np.hypot(vut[:, 3], vut[:, 4])

    # lane 0: follower behind the VUT, then odd-indexed ambient agents behind it
    # lane 1: a free-driving platoon made of the even-indexed ambient agents
    n_lane1 = (n_amb + 1) // 2
    n_lane0 = n_amb - n_lane1
    lane0, lane1 = [], []
    s = 200.0 - gap0 - 4.8
    for i in range(1 + n_lane0):
        v = float(np.clip(v0 + rng.uniform(-1.0, 1.0), 0.0, 30.0))
        lane0.append((_PathAgent(paths[0], s, v, float(rng.uniform(4.2, 5.0)), 1.9), float(rng.uniform(1.0, 1.6))))
        s -= float(rng.uniform(12.0, 25.0))
    s = 200.0 + float(rng.uniform(-10.0, 60.0))
    lane1_speed = float(rng.uniform(0.7, 1.0) * limit)
    for i in range(n_lane1):
        v = float(np.clip(lane1_speed + rng.uniform(-1.0, 1.0), 0.0, 30.0))
        lane1.append((_PathAgent(paths[1], s, v, float(rng.uniform(4.2, 5.0)), 1.9), float(rng.uniform(1.0, 1.6))))
        s -= float(rng.uniform(15.0, 30.0))

    for k in range(params.duration_steps - 1):
        prev = [(a.s, a.v) for a, _ in lane0]
        for i, (agent, tg) in enumerate(lane0):
            if i == 0:
                gap, v_lead = vut_s[k] - agent.s - 4.8, vut_v[k]
            else:
                gap, v_lead = prev[i - 1][0] - agent.s - lane0[i - 1][0].length, prev[i - 1][1]
            agent.step(_follow_accel(gap, agent.v, v_lead, tg))
        prev = [(a.s, a.v) for a, _ in lane1]
        for i, (agent, tg) in enumerate(lane1):
            if i == 0:
                agent.step(_free_accel(agent.v, lane1_speed))
            else:
                gap = prev[i - 1][0] - agent.s - lane1[i - 1][0].length
                agent.step(_follow_accel(gap, agent.v, prev[i - 1][1], tg))

    agents = [a for a, _ in lane0] + [a for a, _ in lane1]
    ids = [0] + list(range(1, len(agents)))
    return Scenario(
        scenario_id=f"car_following-{seed}",
        vut_track=vut,
        agent_tracks=np.array([a.rows for a in agents]).reshape(len(agents), -1, len(STATE_FIELDS)),
        agent_ids=tuple(ids),
        lanes=lanes,
        crosswalks=(),
        principal_agent_id=0,
    )


def _rect(x0, x1, y0, y1) -> CrosswalkPolygon:
    return CrosswalkPolygon(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))


def _intersection(seed: int, params: SynthParams) -> Scenario:
    rng = np.random.default_rng(seed)
    limit_a = params.speed_limit
    limit_b = 0.8 * params.speed_limit
    n_amb = params.n_ambient if params.n_ambient is not None else int(rng.integers(1, 4))
    v0 = params.vut_speed if params.vut_speed is not None else float(rng.uniform(0.4, 0.8) * limit_a)
    key = _driver_key(params, rng)
    h = LANE_WIDTH / 2
    radius = 8.0

    east = Path((-150.0, -h), 0.0).line(300.0)
    west = Path((150.0, h), math.pi).line(300.0)
    north = Path((h, -150.0), math.pi / 2).line(300.0)
    south = Path((-h, 150.0), -math.pi / 2).line(300.0)
    turn = Path((-h, 150.0), -math.pi / 2).line(150.0 - h - radius).arc(radius, -math.pi / 2).line(150.0)

    def east_signal(p):
        return 1 if -30.0 <= p[0] <= -6.0 else 0

    def north_signal(p):
        return 2 if -30.0 <= p[1] <= -6.0 else 0

    lanes = (east.lane(limit_a, east_signal), west.lane(limit_a), north.lane(limit_b, north_signal),
             south.lane(limit_b), turn.lane(0.6 * limit_b))
    crosswalks = (_rect(-10.0, -7.0, -2 * h, 2 * h), _rect(7.0, 10.0, -2 * h, 2 * h),
                  _rect(-2 * h, 2 * h, -10.0, -7.0), _rect(-2 * h, 2 * h, 7.0, 10.0))

    d_vut = float(rng.uniform(35.0, 60.0))
    vut = _drive_vut(-d_vut, -h, 0.0, v0, lanes, key, params)
    conflict = np.array([h, -h])
    passed = np.flatnonzero(vut[:, 0] >= conflict[0])
    t_vut = passed[0] * DT if len(passed) else math.inf

    # crossing agent on the northbound approach
    d_cross = float(rng.uniform(30.0, 50.0))
    v_cross = float(rng.uniform(5.0, 9.0))
    crossing = _PathAgent(north, 150.0 - d_cross, v_cross, 4.6, 1.9)
    t_free = d_cross / max(0.5 * (v_cross + limit_b), 1.0)
    yields = not (t_free + 1.5 < t_vut)
    stop_s = 150.0 - 2 * h - 6.0 - crossing.length / 2

    ambient = []
    kinds = ("west", "follow", "turn")
    for i in range(n_amb):
        kind = kinds[i % 3]
        if kind == "west":
            ambient.append((kind, _PathAgent(west, float(rng.uniform(60.0, 110.0)), float(rng.uniform(0.6, 0.9) * limit_a),
                                             4.6, 1.9), float(rng.uniform(0.7, 1.0) * limit_a)))
        elif kind == "follow":
            ambient.append((kind, _PathAgent(north, crossing.s - float(rng.uniform(12.0, 20.0)), v_cross,
                                             4.6, 1.9), 1.3))
        else:
            ambient.append((kind, _PathAgent(turn, float(rng.uniform(60.0, 100.0)), float(rng.uniform(4.0, 6.0)),
                                             4.6, 1.9), 6.0))

    for k in range(params.duration_steps - 1):
        t = k * DT
        lead_s, lead_v = crossing.s, crossing.v
        if yields and t < t_vut + 1.0:
            remaining = stop_s - crossing.s
            if remaining <= 0.3 or (crossing.v < 0.3 and remaining < 2.0):
                a = -crossing.v / DT
            else:
                need = crossing.v ** 2 / (2.0 * remaining)
                a = -need if need > 1.5 else 0.0
        else:
            a = _free_accel(crossing.v, limit_b)
        crossing.step(a)
        lead = (lead_s, lead_v)
        for kind, agent, target in ambient:
            if kind == "follow":
                gap = lead[0] - agent.s - crossing.length
                agent.step(_follow_accel(gap, agent.v, lead[1], target))
                lead = (agent.s, agent.v)
            else:
                agent.step(_free_accel(agent.v, target))

    agents = [crossing] + [a for _, a, _ in ambient]
    return Scenario(
        scenario_id=f"intersection-{seed}",
        vut_track=vut,
        agent_tracks=np.array([a.rows for a in agents]).reshape(len(agents), -1, len(STATE_FIELDS)),
        agent_ids=tuple(range(len(agents))),
        lanes=lanes,
        crosswalks=crosswalks,
        conflict_point=ConflictPoint(float(conflict[0]), float(conflict[1]), 0),
        principal_agent_id=0,
    )


def generate_synthetic_scenario(kind: str, seed: int, params: Optional[SynthParams] = None) -> Scenario:
    """Deterministic synthetic scene of the given kind."""
    params = params or SynthParams()
    params.validate()
    if kind == "car_following":
        return _car_following(seed, params)
    if kind == "intersection":
        return _intersection(seed, params)
    raise ConfigError(f"unknown scenario kind {kind!r}; expected one of {KINDS}")
