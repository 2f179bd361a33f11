"""VUT trajectory planning: speed x lateral-offset lattice, argmin under a key, gradient refinement."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .config import PlannerConfig
from .cost import (CostWeights, LaneTable, cost_tensor, features_array, match_lane,
                   safe_norm, time_derivative)
from .scenario import DT, FUTURE_STEPS, Frame, LanePolyline, VutFuturePlan, X, Y, HEADING, VX, VY


class LaneGeometry:
    """Arc-length parametrization of a lane centerline, extrapolated linearly past its ends."""

    def __init__(self, lane: LanePolyline):
        self.lane = lane
        self.pts = np.asarray(lane.centers, dtype=float)
        seg = np.diff(self.pts, axis=0)
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.tangents = seg / self.seg_len[:, None]
        self.s = np.concatenate([[0.0], np.cumsum(self.seg_len)])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def _segment(self, s):
        return np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.seg_len) - 1)

    def point(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Centerline points and unit tangents at arc lengths ``s``."""
        s = np.asarray(s, dtype=float)
        i = self._segment(s)
        t = self.tangents[i]
        return self.pts[i] + (s - self.s[i])[..., None] * t, t

    def project(self, p) -> tuple[float, float]:
        """Arc length and signed lateral offset (left positive) of point ``p``."""
        p = np.asarray(p, dtype=float)
        rel = p - self.pts[:-1]
        along = np.clip((rel * self.tangents).sum(1), 0.0, self.seg_len)
        foot = self.pts[:-1] + along[:, None] * self.tangents
        dist = np.linalg.norm(p - foot, axis=1)
        i = int(np.argmin(dist))
        t = self.tangents[i]
        rel_i = p - self.pts[i]
        s = self.s[i] + float(rel_i @ t)
        if i == 0:
            s = min(s, self.s[1])
        d = float(t[0] * rel_i[1] - t[1] * rel_i[0])
        return s, d

    def speed_limit_at(self, s: float) -> float:
        i = int(np.argmin(np.abs(self.s - s)))
        return float(self.lane.speed_limits[i])


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple
    lane: LanePolyline

    def __len__(self):
        return len(self.candidates)


def _quintic(u):
    return u ** 3 * (10.0 - 15.0 * u + 6.0 * u * u)


def longitudinal_profile(v0: float, target: float, cfg: PlannerConfig):
    """Distance travelled and speed at each of the 50 future steps for a constant-acceleration ramp."""
    t = np.arange(1, FUTURE_STEPS + 1) * DT
    a = float(np.clip((target - v0) / cfg.ramp_time, cfg.accel_min, cfg.accel_max))
    t_ramp = (target - v0) / a if a != 0.0 else 0.0
    t_ramp = max(t_ramp, 0.0)
    in_ramp = t <= t_ramp
    dist = np.where(in_ramp, v0 * t + 0.5 * a * t * t,
                    v0 * t_ramp + 0.5 * a * t_ramp ** 2 + target * (t - t_ramp))
    speed = np.where(in_ramp, v0 + a * t, target)
    return dist, speed


def kinematic_audit(xy, start_xy, cfg: PlannerConfig, tol: float = 1e-6) -> bool:
    """Finite-difference check of speed, longitudinal acceleration and curvature bounds."""
    pts = np.vstack([np.asarray(start_xy, float)[None], np.asarray(xy, float)])
    step_speed = np.linalg.norm(np.diff(pts, axis=0), axis=1) / DT
    if np.any(step_speed > cfg.v_max + tol):
        return False
    p = torch.as_tensor(pts)
    v = time_derivative(p, DT, dim=-2)
    speed = safe_norm(v)
    accel = time_derivative(speed, DT)
    a_vec = time_derivative(v, DT, dim=-2)
    if torch.any(accel < cfg.accel_min - tol) or torch.any(accel > cfg.accel_max + tol):
        return False
    moving = speed > 0.5
    cross = v[:, 0] * a_vec[:, 1] - v[:, 1] * a_vec[:, 0]
    kappa = torch.where(moving, cross / torch.where(moving, speed, torch.ones_like(speed)) ** 3,
                        torch.zeros_like(speed))
    return bool(torch.all(kappa.abs() <= cfg.max_curvature + tol))


def candidates_from_state(x: float, y: float, heading: float, speed: float,
                          lanes: Sequence[LanePolyline], cfg: PlannerConfig) -> CandidateSet:
    lane = match_lane(x, y, heading, lanes)
    geo = LaneGeometry(lane)
    s0, d0 = geo.project((x, y))
    limit = geo.speed_limit_at(s0)
    targets = np.linspace(0.0, cfg.speed_margin * limit, cfg.n_speeds) if cfg.n_speeds > 1 else np.array([limit])
    out = []
    for target in targets:
        dist, _ = longitudinal_profile(speed, float(target), cfg)
        travel = float(dist[-1])
        for d_end in cfg.lateral_offsets:
            if travel > 1e-9:
                lat = d0 + (d_end - d0) * _quintic(np.clip(dist / travel, 0.0, 1.0))
            else:
                lat = np.full(FUTURE_STEPS, d0)
            centre, tangent = geo.point(s0 + dist)
            normal = np.column_stack([-tangent[:, 1], tangent[:, 0]])
            xy = centre + lat[:, None] * normal
            if not kinematic_audit(xy, (x, y), cfg):
                continue
            out.append(VutFuturePlan.from_xy(xy, (x, y), heading))
    if not out:
        # hardest admissible braking along the centerline is always feasible
        dist, _ = longitudinal_profile(speed, 0.0, PlannerConfig(
            ramp_time=1e-6, accel_min=cfg.accel_min, accel_max=cfg.accel_max))
        centre, tangent = geo.point(s0 + dist)
        normal = np.column_stack([-tangent[:, 1], tangent[:, 0]])
        xy = centre + d0 * normal
        out.append(VutFuturePlan.from_xy(xy, (x, y), heading))
    return CandidateSet(tuple(out), lane)


def vut_state(frame: Frame):
    s = frame.vut_history[-1]
    return float(s[X]), float(s[Y]), float(s[HEADING]), float(math.hypot(s[VX], s[VY]))


def generate_candidates(frame: Frame, cfg: PlannerConfig = PlannerConfig()) -> CandidateSet:
    x, y, h, v = vut_state(frame)
    return candidates_from_state(x, y, h, v, frame.lanes, cfg)


MAX_HALVINGS = 30


def refine(plan: VutFuturePlan, key: CostWeights, lanes: LaneTable, start_xy, start_heading: float,
           cfg: PlannerConfig) -> VutFuturePlan:
    """Gradient descent on plan coordinates; a step is kept only if it lowers the cost and stays feasible."""
    if cfg.refine_steps <= 0 or cfg.learning_rate <= 0:
        return plan
    xy = torch.as_tensor(plan.xy.copy(), dtype=torch.float64)
    heading = torch.as_tensor(plan.states[:, 2].copy(), dtype=torch.float64)
    with torch.no_grad():
        best = float(cost_tensor(xy, key, lanes, heading))
    lr = cfg.learning_rate
    for _ in range(cfg.refine_steps):
        x = xy.clone().requires_grad_(True)
        c = cost_tensor(x, key, lanes, heading)
        (g,) = torch.autograd.grad(c, x)
        accepted = False
        # stiff keys (large steer/direction weights) need many halvings before the cost drops
        for _ in range(MAX_HALVINGS):
            trial = xy - lr * g
            with torch.no_grad():
                tc = float(cost_tensor(trial, key, lanes, heading))
            if tc < best and kinematic_audit(trial.numpy(), start_xy, cfg):
                xy, best, accepted = trial, tc, True
                break
            lr *= 0.5
        if not accepted:
            break
        # warm start the next search just above the accepted step
        lr = min(2.0 * lr, cfg.learning_rate)
    return VutFuturePlan.from_xy(xy.numpy(), start_xy, start_heading)


def plan_from_state(x: float, y: float, heading: float, speed: float, lanes: Sequence[LanePolyline],
                    key: CostWeights, cfg: PlannerConfig = PlannerConfig()) -> VutFuturePlan:
    cands = candidates_from_state(x, y, heading, speed, lanes, cfg)
    table = LaneTable.from_lanes([cands.lane])
    costs = features_array(cands.candidates, table) @ key.w
    best = int(np.argmin(costs))  # first index wins exact ties
    refined = refine(cands.candidates[best], key, table, (x, y), heading, cfg)
    if float(features_array([refined], table)[0] @ key.w) > costs[best]:
        return cands.candidates[best]
    return refined


def plan_vut_trajectory(frame: Frame, key: CostWeights, cfg: PlannerConfig = PlannerConfig()) -> VutFuturePlan:
    """Minimum-cost VUT plan from the frame's t0 state under ``key``."""
    x, y, h, v = vut_state(frame)
    return plan_from_state(x, y, h, v, frame.lanes, key, cfg)


def arc_length(plan: VutFuturePlan, start_xy) -> float:
    pts = np.vstack([np.asarray(start_xy, float)[None], plan.xy])
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
