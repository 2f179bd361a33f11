"""Scenario data model, frame windowing, VUT-local transforms and scenario I/O.

All tracks are stored as float arrays with one row per 10 Hz step and the
column order of ``STATE_FIELDS``. Invalid rows are kept at all-zero.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

HZ = 10
DT = 1.0 / HZ
HISTORY_STEPS = 20
FUTURE_STEPS = 50
WINDOW_STEPS = HISTORY_STEPS + FUTURE_STEPS
MAX_AGENTS = 10

STATE_FIELDS = ("x", "y", "heading", "vx", "vy", "length", "width", "valid")
X, Y, HEADING, VX, VY, LENGTH, WIDTH, VALID = range(8)

LANE_FIELDS = ("cx", "cy", "lx", "ly", "rx", "ry", "heading", "speed_limit", "signal")
SIGNALS = ("none", "green", "yellow", "red")

SCHEMA_VERSION = 1


class ScenarioParseError(ValueError):
    """Raised when a scenario file does not follow the schema."""


class ScenarioValidationError(ValueError):
    """Raised when parsed data breaks a scenario invariant."""


class ConfigError(ValueError):
    pass


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=float), 2.0 * math.pi)


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    vx: float
    vy: float
    length: float
    width: float
    valid: bool

    def __post_init__(self):
        vals = [self.x, self.y, self.heading, self.vx, self.vy, self.length, self.width]
        if not all(math.isfinite(v) for v in vals):
            raise ScenarioValidationError("agent state has non-finite fields")
        if self.valid and (self.length <= 0 or self.width <= 0):
            raise ScenarioValidationError("valid agent state needs positive length and width")
        if not (-math.pi < self.heading <= math.pi):
            raise ScenarioValidationError(f"heading {self.heading} outside (-pi, pi]")

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.vx, self.vy,
                         self.length, self.width, float(self.valid)])

    @classmethod
    def from_array(cls, row) -> "AgentState":
        r = [float(v) for v in row]
        return cls(*r[:7], valid=bool(r[7]))


@dataclass(frozen=True)
class AgentHistory:
    agent_id: object
    states: np.ndarray  # [20, 8]

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states))
        if self.states.shape != (HISTORY_STEPS, len(STATE_FIELDS)):
            raise ScenarioValidationError(f"history must be {HISTORY_STEPS} x 8, got {self.states.shape}")


@dataclass(frozen=True)
class VutFuturePlan:
    """Anticipated VUT trajectory: 50 rows of (x, y, heading, speed)."""

    states: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states))
        if self.states.shape != (FUTURE_STEPS, 4):
            raise ScenarioValidationError(f"VUT plan must be {FUTURE_STEPS} x 4, got {self.states.shape}")
        if not np.all(np.isfinite(self.states)):
            raise ScenarioValidationError("VUT plan has non-finite entries")

    @property
    def xy(self) -> np.ndarray:
        return self.states[:, :2]

    def check_speeds(self, start_xy, v_max: float, tol: float = 1e-9) -> bool:
        pts = np.vstack([np.asarray(start_xy, float)[None], self.xy])
        speeds = np.linalg.norm(np.diff(pts, axis=0), axis=1) / DT
        return bool(np.all(speeds <= v_max + tol))

    @classmethod
    def from_xy(cls, xy, start_xy, start_heading: float) -> "VutFuturePlan":
        """Build a plan from positions, deriving heading and speed by backward differences."""
        xy = np.asarray(xy, dtype=float)
        pts = np.vstack([np.asarray(start_xy, float)[None], xy])
        d = np.diff(pts, axis=0)
        speed = np.linalg.norm(d, axis=1) / DT
        heading = np.empty(len(xy))
        prev = float(start_heading)
        for i, (dx, dy) in enumerate(d):
            if math.hypot(dx, dy) > 1e-6:
                prev = math.atan2(dy, dx)
            heading[i] = prev
        return cls(np.column_stack([xy, wrap_angle(heading), speed]))


@dataclass(frozen=True)
class LanePolyline:
    """Lane centerline with boundaries; ``waypoints`` rows follow ``LANE_FIELDS``."""

    waypoints: np.ndarray

    def __post_init__(self):
        wp = _frozen(self.waypoints)
        object.__setattr__(self, "waypoints", wp)
        if wp.ndim != 2 or wp.shape[1] != len(LANE_FIELDS):
            raise ScenarioValidationError(f"lane waypoints must be N x {len(LANE_FIELDS)}")
        if len(wp) < 2:
            raise ScenarioValidationError("lane needs at least 2 waypoints")
        if not np.all(np.isfinite(wp)):
            raise ScenarioValidationError("lane has non-finite values")
        if np.any(np.linalg.norm(np.diff(wp[:, :2], axis=0), axis=1) == 0):
            raise ScenarioValidationError("consecutive lane center points coincide")
        if np.any(wp[:, 7] <= 0):
            raise ScenarioValidationError("lane speed_limit must be positive")
        if not np.all(np.isin(wp[:, 8], (0, 1, 2, 3))):
            raise ScenarioValidationError("lane signal code must be in {0,1,2,3}")

    @property
    def centers(self) -> np.ndarray:
        return self.waypoints[:, :2]

    @property
    def headings(self) -> np.ndarray:
        return self.waypoints[:, 6]

    @property
    def speed_limits(self) -> np.ndarray:
        return self.waypoints[:, 7]


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    return o1 * o2 < 0 and o3 * o4 < 0


@dataclass(frozen=True)
class CrosswalkPolygon:
    perimeter: np.ndarray  # [P, 2], closed implicitly

    def __post_init__(self):
        pts = _frozen(self.perimeter)
        object.__setattr__(self, "perimeter", pts)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise ScenarioValidationError("crosswalk needs >= 3 (x, y) vertices")
        if not np.all(np.isfinite(pts)):
            raise ScenarioValidationError("crosswalk has non-finite vertices")
        n = len(pts)
        for i in range(n):
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                if _segments_intersect(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]):
                    raise ScenarioValidationError("crosswalk polygon self-intersects")


@dataclass(frozen=True)
class ConflictPoint:
    x: float
    y: float
    agent_id: object = None


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    vut_track: np.ndarray            # [T, 8]
    agent_tracks: np.ndarray         # [A, T, 8]
    agent_ids: tuple = ()
    lanes: tuple = ()
    crosswalks: tuple = ()
    conflict_point: Optional[ConflictPoint] = None
    principal_agent_id: object = None

    def __post_init__(self):
        vut = _frozen(self.vut_track)
        agents = np.asarray(self.agent_tracks, dtype=float)
        if agents.size == 0:
            agents = np.zeros((0, len(vut), len(STATE_FIELDS)))
        agents = _frozen(agents)
        object.__setattr__(self, "vut_track", vut)
        object.__setattr__(self, "agent_tracks", agents)
        ids = tuple(self.agent_ids) if len(self.agent_ids) else tuple(range(len(agents)))
        object.__setattr__(self, "agent_ids", ids)
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "crosswalks", tuple(self.crosswalks))
        self.validate()

    @property
    def duration_steps(self) -> int:
        return len(self.vut_track)

    def validate(self) -> None:
        t = self.duration_steps
        if self.vut_track.ndim != 2 or self.vut_track.shape[1] != len(STATE_FIELDS):
            raise ScenarioValidationError("vut_track must be T x 8")
        if self.agent_tracks.ndim != 3 or self.agent_tracks.shape[1:] != (t, len(STATE_FIELDS)):
            raise ScenarioValidationError(f"agent tracks must all have {t} steps of 8 fields")
        if len(self.agent_ids) != len(self.agent_tracks):
            raise ScenarioValidationError("agent_ids length does not match agent_tracks")
        if len(set(self.agent_ids)) != len(self.agent_ids):
            raise ScenarioValidationError("agent_ids must be unique")
        bad = np.flatnonzero(self.vut_track[:, VALID] == 0)
        if len(bad):
            raise ScenarioValidationError(f"vut_track invalid at step {int(bad[0])}")
        _check_track(self.vut_track, "vut_track")
        for i, tr in enumerate(self.agent_tracks):
            _check_track(tr, f"agent_tracks[{i}]")


def _check_track(track: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(track)):
        raise ScenarioValidationError(f"{name} has non-finite values")
    valid = track[:, VALID] != 0
    if not np.all(np.isin(track[:, VALID], (0.0, 1.0))):
        raise ScenarioValidationError(f"{name} valid flags must be 0 or 1")
    sizes = track[valid][:, [LENGTH, WIDTH]]
    if np.any(sizes <= 0):
        step = int(np.flatnonzero(valid)[np.flatnonzero(np.any(sizes <= 0, axis=1))[0]])
        raise ScenarioValidationError(f"{name} step {step}: length/width must be positive")
    h = track[valid][:, HEADING]
    if np.any(h <= -math.pi) or np.any(h > math.pi):
        raise ScenarioValidationError(f"{name}: heading outside (-pi, pi]")


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0


@dataclass(frozen=True)
class Frame:
    """One 7 s sample: 2 s of history and 5 s of truth futures around ``t0``.

    ``origin`` is the pose, in global coordinates, of the frame's coordinate
    system. It is the identity for frames cut from a scenario and the VUT
    pose at ``t0`` after :func:`to_local_frame`.
    """

    t0: int
    vut_history: np.ndarray           # [20, 8]
    agent_histories: np.ndarray       # [10, 20, 8]
    agent_ids: tuple                  # 10 entries, None for padded slots
    agent_mask: np.ndarray            # [10] bool
    lanes: tuple
    crosswalks: tuple
    vut_future_truth: VutFuturePlan
    agent_futures_truth: np.ndarray   # [10, 50, 2]
    agent_future_valid: np.ndarray    # [10, 50] bool
    origin: Pose = field(default_factory=Pose)

    @property
    def vut_pose(self) -> Pose:
        s = self.vut_history[-1]
        return Pose(float(s[X]), float(s[Y]), float(s[HEADING]))

    @property
    def is_local(self) -> bool:
        p = self.vut_pose
        return abs(p.x) < 1e-9 and abs(p.y) < 1e-9 and abs(p.heading) < 1e-9

    def agent_history(self, slot: int) -> AgentHistory:
        return AgentHistory(self.agent_ids[slot], self.agent_histories[slot])


# ---------------------------------------------------------------------------
# rigid motions

def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _transform_points(pts, rot: np.ndarray, shift) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    return pts @ rot.T + np.asarray(shift, dtype=float)


def _transform_states(states: np.ndarray, rot: np.ndarray, shift, dtheta: float) -> np.ndarray:
    out = np.array(states, dtype=float, copy=True)
    valid = out[..., VALID] != 0
    moved = out.copy()
    moved[..., :2] = _transform_points(out[..., :2], rot, shift)
    moved[..., 2] = wrap_angle(out[..., 2] + dtheta)
    moved[..., 3:5] = out[..., 3:5] @ rot.T
    out[valid] = moved[valid]
    return out


def _transform_lane(lane: LanePolyline, rot, shift, dtheta) -> LanePolyline:
    wp = np.array(lane.waypoints, copy=True)
    for c in (0, 2, 4):
        wp[:, c:c + 2] = _transform_points(wp[:, c:c + 2], rot, shift)
    wp[:, 6] = wrap_angle(wp[:, 6] + dtheta)
    return LanePolyline(wp)


def apply_rigid_motion(scenario: Scenario, dx: float, dy: float, dtheta: float) -> Scenario:
    """Rotate the whole scenario by ``dtheta`` about the origin, then translate by (dx, dy)."""
    rot, shift = _rot(dtheta), (dx, dy)
    cp = scenario.conflict_point
    if cp is not None:
        px, py = _transform_points([cp.x, cp.y], rot, shift)
        cp = ConflictPoint(float(px), float(py), cp.agent_id)
    return replace(
        scenario,
        vut_track=_transform_states(scenario.vut_track, rot, shift, dtheta),
        agent_tracks=_transform_states(scenario.agent_tracks, rot, shift, dtheta),
        lanes=tuple(_transform_lane(l, rot, shift, dtheta) for l in scenario.lanes),
        crosswalks=tuple(CrosswalkPolygon(_transform_points(c.perimeter, rot, shift))
                         for c in scenario.crosswalks),
        conflict_point=cp,
    )


def to_local_frame(frame: Frame) -> Frame:
    """Express every field of ``frame`` relative to the VUT pose at t0."""
    pose = frame.vut_pose
    rot = _rot(-pose.heading)
    shift = -(rot @ np.array([pose.x, pose.y]))
    dtheta = -pose.heading

    fut = frame.vut_future_truth.states
    fut_local = np.column_stack([
        _transform_points(fut[:, :2], rot, shift),
        wrap_angle(fut[:, 2] + dtheta),
        fut[:, 3],
    ])
    agent_fut = np.array(frame.agent_futures_truth, copy=True)
    fv = frame.agent_future_valid
    agent_fut[fv] = _transform_points(agent_fut[fv], rot, shift)

    # compose the new origin: global pose of the VUT at t0
    o = frame.origin
    ox, oy = _transform_points([pose.x, pose.y], _rot(o.heading), (o.x, o.y))
    origin = Pose(float(ox), float(oy), float(wrap_angle(o.heading + pose.heading)))

    vut_hist = _transform_states(frame.vut_history, rot, shift, dtheta)
    # pin the t0 pose exactly to the identity
    vut_hist[-1, :3] = 0.0
    return replace(
        frame,
        vut_history=vut_hist,
        agent_histories=_transform_states(frame.agent_histories, rot, shift, dtheta),
        lanes=tuple(_transform_lane(l, rot, shift, dtheta) for l in frame.lanes),
        crosswalks=tuple(CrosswalkPolygon(_transform_points(c.perimeter, rot, shift))
                         for c in frame.crosswalks),
        vut_future_truth=VutFuturePlan(fut_local),
        agent_futures_truth=agent_fut,
        origin=origin,
    )


def to_global_points(points, origin: Pose) -> np.ndarray:
    """Map local (x, y) points back to global coordinates using a frame origin."""
    return _transform_points(points, _rot(origin.heading), (origin.x, origin.y))


def to_local_points(points, origin: Pose) -> np.ndarray:
    rot = _rot(-origin.heading)
    return (np.asarray(points, float) - np.array([origin.x, origin.y])) @ rot.T


# ---------------------------------------------------------------------------
# frame construction

def _clean(states: np.ndarray) -> np.ndarray:
    out = np.array(states, dtype=float, copy=True)
    out[out[..., VALID] == 0] = 0.0
    return out


def _id_key(agent_id):
    return (0, agent_id, "") if isinstance(agent_id, (int, np.integer)) else (1, 0, str(agent_id))


def select_nearest_agents(scenario: Scenario, t0: int):
    """Pick the 10 agents nearest the VUT at ``t0``; returns (histories, ids, mask)."""
    histories = np.zeros((MAX_AGENTS, HISTORY_STEPS, len(STATE_FIELDS)))
    ids: list = [None] * MAX_AGENTS
    mask = np.zeros(MAX_AGENTS, dtype=bool)
    if t0 < HISTORY_STEPS - 1 or t0 >= scenario.duration_steps:
        raise ValueError(f"t0={t0} leaves no full history window")
    vut_xy = scenario.vut_track[t0, :2]
    ranked = []
    for i, track in enumerate(scenario.agent_tracks):
        if track[t0, VALID] == 0:
            continue
        d = float(np.hypot(*(track[t0, :2] - vut_xy)))
        ranked.append((d, _id_key(scenario.agent_ids[i]), i))
    ranked.sort()
    for slot, (_, _, i) in enumerate(ranked[:MAX_AGENTS]):
        histories[slot] = _clean(scenario.agent_tracks[i, t0 - HISTORY_STEPS + 1:t0 + 1])
        ids[slot] = scenario.agent_ids[i]
        mask[slot] = True
    return histories, tuple(ids), mask


def build_frame(scenario: Scenario, t0: int) -> Frame:
    """Cut the frame at ``t0``; truth futures beyond the log end are zero and flagged invalid."""
    histories, ids, mask = select_nearest_agents(scenario, t0)
    T = scenario.duration_steps
    idx = np.arange(t0 + 1, t0 + 1 + FUTURE_STEPS)
    inside = idx < T
    vut_fut = np.zeros((FUTURE_STEPS, 4))
    rows = scenario.vut_track[idx[inside]]
    vut_fut[inside] = np.column_stack([rows[:, X], rows[:, Y], rows[:, HEADING],
                                       np.hypot(rows[:, VX], rows[:, VY])])
    if not inside.all():
        # hold the final logged state past the end of the log
        last = vut_fut[inside][-1] if inside.any() else np.r_[scenario.vut_track[-1, :3], 0.0]
        vut_fut[~inside] = last
    agent_fut = np.zeros((MAX_AGENTS, FUTURE_STEPS, 2))
    fut_valid = np.zeros((MAX_AGENTS, FUTURE_STEPS), dtype=bool)
    index = {aid: i for i, aid in enumerate(scenario.agent_ids)}
    for slot in range(MAX_AGENTS):
        if not mask[slot]:
            continue
        tr = scenario.agent_tracks[index[ids[slot]]]
        v = np.zeros(FUTURE_STEPS, dtype=bool)
        v[inside] = tr[idx[inside], VALID] != 0
        agent_fut[slot, v] = tr[idx[v], :2]
        fut_valid[slot] = v
    return Frame(
        t0=t0,
        vut_history=_clean(scenario.vut_track[t0 - HISTORY_STEPS + 1:t0 + 1]),
        agent_histories=histories,
        agent_ids=ids,
        agent_mask=mask,
        lanes=scenario.lanes,
        crosswalks=scenario.crosswalks,
        vut_future_truth=VutFuturePlan(vut_fut),
        agent_futures_truth=agent_fut,
        agent_future_valid=fut_valid,
    )


def slice_frames(scenario: Scenario, stride: int = 10) -> list[Frame]:
    """Cut 70-step windows at t0 = 19, 19 + stride, ... while the full horizon fits."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    last_t0 = scenario.duration_steps - FUTURE_STEPS - 1
    return [build_frame(scenario, t0) for t0 in range(HISTORY_STEPS - 1, last_t0 + 1, stride)]


# ---------------------------------------------------------------------------
# scenario file I/O (schema v1, JSON)

def _num(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioParseError(f"{where}: expected a number, got {type(v).__name__}")
    return float(v)


def _parse_track(raw, where: str) -> np.ndarray:
    if not isinstance(raw, list):
        raise ScenarioParseError(f"{where}: expected a list of states")
    rows = []
    for i, st in enumerate(raw):
        if not isinstance(st, list) or len(st) != len(STATE_FIELDS):
            raise ScenarioParseError(f"{where}[{i}]: expected [{', '.join(STATE_FIELDS)}]")
        row = [_num(v, f"{where}[{i}].{STATE_FIELDS[k]}") for k, v in enumerate(st[:7])]
        valid = st[7]
        if isinstance(valid, bool):
            valid = float(valid)
        row.append(_num(valid, f"{where}[{i}].valid"))
        rows.append(row)
    return np.array(rows, dtype=float).reshape(len(rows), len(STATE_FIELDS))


def scenario_from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioParseError("top level must be an object")
    for key in ("scenario_id", "hz", "vut_track", "agent_tracks", "lanes", "crosswalks"):
        if key not in data:
            raise ScenarioParseError(f"missing top-level key '{key}'")
    known = {"scenario_id", "hz", "vut_track", "agent_tracks", "lanes", "crosswalks",
             "agent_ids", "conflict_point", "principal_agent_id", "schema_version"}
    extra = sorted(set(data) - known)
    if extra:
        raise ScenarioParseError(f"unknown top-level key '{extra[0]}'")
    if data["hz"] != HZ:
        raise ScenarioParseError(f"hz: must equal {HZ}, got {data['hz']!r}")
    vut = _parse_track(data["vut_track"], "vut_track")
    if not isinstance(data["agent_tracks"], list):
        raise ScenarioParseError("agent_tracks: expected a list")
    agents = [_parse_track(t, f"agent_tracks[{i}]") for i, t in enumerate(data["agent_tracks"])]
    lanes = []
    if not isinstance(data["lanes"], list):
        raise ScenarioParseError("lanes: expected a list")
    for i, lane in enumerate(data["lanes"]):
        if not isinstance(lane, list):
            raise ScenarioParseError(f"lanes[{i}]: expected a list of waypoints")
        wps = []
        for j, wp in enumerate(lane):
            if not isinstance(wp, list) or len(wp) != len(LANE_FIELDS):
                raise ScenarioParseError(f"lanes[{i}][{j}]: expected [{', '.join(LANE_FIELDS)}]")
            wps.append([_num(v, f"lanes[{i}][{j}].{LANE_FIELDS[k]}") for k, v in enumerate(wp)])
        try:
            lanes.append(LanePolyline(np.array(wps, dtype=float).reshape(-1, len(LANE_FIELDS))))
        except ScenarioValidationError as exc:
            raise ScenarioValidationError(f"lanes[{i}]: {exc}") from None
    crosswalks = []
    if not isinstance(data["crosswalks"], list):
        raise ScenarioParseError("crosswalks: expected a list")
    for i, cw in enumerate(data["crosswalks"]):
        if not isinstance(cw, list):
            raise ScenarioParseError(f"crosswalks[{i}]: expected a list of [x, y]")
        pts = []
        for j, p in enumerate(cw):
            if not isinstance(p, list) or len(p) != 2:
                raise ScenarioParseError(f"crosswalks[{i}][{j}]: expected [x, y]")
            pts.append([_num(p[0], f"crosswalks[{i}][{j}].x"), _num(p[1], f"crosswalks[{i}][{j}].y")])
        try:
            crosswalks.append(CrosswalkPolygon(np.array(pts, dtype=float).reshape(-1, 2)))
        except ScenarioValidationError as exc:
            raise ScenarioValidationError(f"crosswalks[{i}]: {exc}") from None
    cp = data.get("conflict_point")
    conflict = None
    if cp is not None:
        if not isinstance(cp, dict) or "x" not in cp or "y" not in cp:
            raise ScenarioParseError("conflict_point: expected {x, y, agent_id}")
        conflict = ConflictPoint(_num(cp["x"], "conflict_point.x"), _num(cp["y"], "conflict_point.y"),
                                 cp.get("agent_id"))
    lengths = {len(vut)} | {len(a) for a in agents}
    if len(lengths) > 1:
        raise ScenarioValidationError(f"all tracks must have {len(vut)} steps")
    return Scenario(
        scenario_id=str(data["scenario_id"]),
        vut_track=vut,
        agent_tracks=np.stack(agents) if agents else np.zeros((0, len(vut), len(STATE_FIELDS))),
        agent_ids=tuple(data.get("agent_ids") or range(len(agents))),
        lanes=tuple(lanes),
        crosswalks=tuple(crosswalks),
        conflict_point=conflict,
        principal_agent_id=data.get("principal_agent_id"),
    )


def _py_id(v):
    return int(v) if isinstance(v, (int, np.integer)) else v


def scenario_to_dict(scenario: Scenario) -> dict:
    def track(a):
        return [[float(v) for v in row[:7]] + [int(row[7])] for row in a]

    out = {
        "schema_version": SCHEMA_VERSION,
        "scenario_id": scenario.scenario_id,
        "hz": HZ,
        "vut_track": track(scenario.vut_track),
        "agent_tracks": [track(a) for a in scenario.agent_tracks],
        "agent_ids": [_py_id(i) for i in scenario.agent_ids],
        "lanes": [[[float(v) for v in wp[:8]] + [int(wp[8])] for wp in lane.waypoints]
                  for lane in scenario.lanes],
        "crosswalks": [[[float(x), float(y)] for x, y in cw.perimeter] for cw in scenario.crosswalks],
    }
    if scenario.conflict_point is not None:
        cp = scenario.conflict_point
        out["conflict_point"] = {"x": cp.x, "y": cp.y, "agent_id": _py_id(cp.agent_id)}
    if scenario.principal_agent_id is not None:
        out["principal_agent_id"] = _py_id(scenario.principal_agent_id)
    return out


def save_scenario(scenario: Scenario, path) -> None:
    # json writes floats with repr(), which round-trips every finite double
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), separators=(",", ":")))


def load_scenario(path) -> Scenario:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{path}: not valid JSON ({exc})") from None
    return scenario_from_dict(data)


def stack_states(states: Sequence[AgentState]) -> np.ndarray:
    return np.array([s.to_array() for s in states], dtype=float).reshape(-1, len(STATE_FIELDS))
