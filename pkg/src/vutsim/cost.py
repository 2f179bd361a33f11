"""Seven-feature driving cost, margin-based weight fitting and the Gaussian weight distribution."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .scenario import DT, HEADING, X, Y, Frame, LanePolyline, VutFuturePlan, wrap_angle

FEATURE_NAMES = ("speed", "accel", "jerk", "steer", "steer_rate", "center", "direction")
N_FEATURES = len(FEATURE_NAMES)
EFFICIENCY = FEATURE_NAMES.index("speed")

WHEELBASE = 2.8
# below this speed the motion direction is undefined; heading falls back to the plan's field
MOVING_SPEED = 1e-3
# regularizes curvature = cross(v, a) / |v|^3 near standstill
CURVATURE_SPEED_EPS = 0.1

KEY_FORMAT = "cost-key/v1"
DISTRIBUTION_FORMAT = "cost-distribution/v1"


class FeatureError(ValueError):
    pass


class FitError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class CostFeatureVector:
    f_speed: float
    f_accel: float
    f_jerk: float
    f_steer: float
    f_steer_rate: float
    f_center: float
    f_direction: float

    def as_array(self) -> np.ndarray:
        return np.array([self.f_speed, self.f_accel, self.f_jerk, self.f_steer,
                         self.f_steer_rate, self.f_center, self.f_direction])

    @classmethod
    def from_array(cls, a) -> "CostFeatureVector":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class CostWeights:
    """One key: a nonnegative weight per cost feature."""

    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=float).reshape(-1)
        if w.shape != (N_FEATURES,):
            raise ParameterError(f"expected {N_FEATURES} weights, got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ParameterError("cost weights must be finite and nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    def with_weight(self, name: str, value: float) -> "CostWeights":
        w = self.w.copy()
        w[FEATURE_NAMES.index(name)] = value
        return CostWeights(w)

    def as_dict(self) -> dict:
        return {n: float(v) for n, v in zip(FEATURE_NAMES, self.w)}


@dataclass(frozen=True)
class DistributionalCostWeights:
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        s2 = np.array(self.sigma2, dtype=float).reshape(-1)
        if mu.shape != (N_FEATURES,) or s2.shape != (N_FEATURES,):
            raise ParameterError("distribution needs 7 means and 7 variances")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(s2))):
            raise ParameterError("distribution parameters must be finite")
        if np.any(s2 <= 0):
            raise ParameterError("variances must be positive")
        mu.setflags(write=False)
        s2.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", s2)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.sigma2)

    def mean_key(self) -> CostWeights:
        return CostWeights(np.maximum(self.mu, 0.0))


# Prior over weights before any fitting, and the key that drives the VUT in
# generated scenarios.
DEFAULT_PRIOR = DistributionalCostWeights(
    mu=np.array([0.5, 1.0, 0.05, 10.0, 1.0, 2.0, 10.0]),
    sigma2=np.array([0.25, 1.0, 0.0025, 100.0, 1.0, 4.0, 100.0]),
)
REFERENCE_KEY = CostWeights(np.array([0.3, 1.5, 0.02, 5.0, 0.5, 4.0, 5.0]))
DEFAULT_OBS_NOISE_VAR = np.array([0.04, 0.25, 1e-4, 4.0, 0.04, 1.0, 4.0])


# ---------------------------------------------------------------------------
# lanes

@dataclass(frozen=True)
class LaneTable:
    """Flat table of lane waypoints used for nearest-waypoint queries."""

    centers: np.ndarray      # [M, 2]
    headings: np.ndarray     # [M]
    speed_limits: np.ndarray  # [M]

    def __len__(self):
        return len(self.centers)

    @classmethod
    def from_lanes(cls, lanes: Sequence[LanePolyline]) -> "LaneTable":
        if not lanes:
            return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0))
        wp = np.vstack([l.waypoints for l in lanes])
        return cls(wp[:, :2].copy(), wp[:, 6].copy(), wp[:, 7].copy())


def match_lane(x: float, y: float, heading: float, lanes: Sequence[LanePolyline]) -> LanePolyline:
    """Nearest lane whose local direction is within 90 degrees of ``heading``."""
    best, best_d = None, math.inf
    for lane in lanes:
        c = lane.centers
        d2 = (c[:, 0] - x) ** 2 + (c[:, 1] - y) ** 2
        i = int(np.argmin(d2))
        if abs(float(wrap_angle(lane.headings[i] - heading))) >= math.pi / 2:
            continue
        if d2[i] < best_d:
            best, best_d = lane, float(d2[i])
    if best is None:
        raise PlanningError("VUT cannot be matched to any lane")
    return best


def lane_table(scene) -> LaneTable:
    """Accepts a LaneTable, a Frame, a sequence of lanes, or a SceneContext (VUT slot)."""
    if isinstance(scene, LaneTable):
        return scene
    if isinstance(scene, Frame):
        # the VUT is scored against its own lane so crossing lanes do not interfere
        s = scene.vut_history[-1]
        return LaneTable.from_lanes([match_lane(s[X], s[Y], s[HEADING], scene.lanes)])
    if hasattr(scene, "lanes") and hasattr(scene, "lane_mask"):
        feats = np.asarray(scene.lanes)[0]
        mask = np.asarray(scene.lane_mask)[0]
        pts = feats[mask]
        return LaneTable(pts[:, :2].copy(), pts[:, 6].copy(), pts[:, 7].copy())
    return LaneTable.from_lanes(list(scene))


# ---------------------------------------------------------------------------
# differentiable features

def time_derivative(f: torch.Tensor, dt: float = DT, dim: int = -1) -> torch.Tensor:
    """Central differences inside, second-order one-sided differences at both ends."""
    f = f.movedim(dim, -1)
    if f.shape[-1] < 3:
        raise FeatureError("need at least 3 samples for derivatives")
    first = (-3.0 * f[..., :1] + 4.0 * f[..., 1:2] - f[..., 2:3]) / (2.0 * dt)
    mid = (f[..., 2:] - f[..., :-2]) / (2.0 * dt)
    last = (3.0 * f[..., -1:] - 4.0 * f[..., -2:-1] + f[..., -3:-2]) / (2.0 * dt)
    return torch.cat([first, mid, last], dim=-1).movedim(-1, dim)


def safe_norm(v: torch.Tensor) -> torch.Tensor:
    sq = (v * v).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def feature_terms(xy: torch.Tensor, lanes: LaneTable, heading: torch.Tensor | None = None,
                  dt: float = DT, wheelbase: float = WHEELBASE) -> torch.Tensor:
    """Per-feature values for trajectories ``xy`` [..., T, 2]; returns [..., 7]."""
    if len(lanes) == 0:
        raise FeatureError("scene has no lanes: centerline and direction features are undefined")
    centers = torch.as_tensor(lanes.centers, dtype=xy.dtype)
    lane_h = torch.as_tensor(lanes.headings, dtype=xy.dtype)
    limits = torch.as_tensor(lanes.speed_limits, dtype=xy.dtype)

    v = time_derivative(xy, dt, dim=-2)
    speed = safe_norm(v)
    a_long = time_derivative(speed, dt)
    jerk = time_derivative(a_long, dt)
    a_vec = time_derivative(v, dt, dim=-2)
    cross = v[..., 0] * a_vec[..., 1] - v[..., 1] * a_vec[..., 0]
    kappa = cross / (speed * speed + CURVATURE_SPEED_EPS ** 2) ** 1.5
    steer = kappa * wheelbase
    steer_rate = time_derivative(steer, dt)

    with torch.no_grad():
        d2 = ((xy.detach()[..., :, None, :] - centers) ** 2).sum(-1)
        nearest = d2.argmin(-1)
    c = centers[nearest]
    h = lane_h[nearest]
    limit = limits[nearest]
    ux, uy = torch.cos(h), torch.sin(h)
    rel = xy - c
    lateral = ux * rel[..., 1] - uy * rel[..., 0]

    moving = speed > MOVING_SPEED
    cr = ux * v[..., 1] - uy * v[..., 0]
    dp = ux * v[..., 0] + uy * v[..., 1]
    dev_moving = torch.atan2(torch.where(moving, cr, torch.zeros_like(cr)),
                             torch.where(moving, dp, torch.ones_like(dp)))
    if heading is None:
        dev_still = torch.zeros_like(dev_moving)
    else:
        dh = heading - h
        dev_still = torch.atan2(torch.sin(dh), torch.cos(dh))
    dev = torch.where(moving, dev_moving, dev_still)

    terms = [(speed - limit) ** 2, a_long ** 2, jerk ** 2, steer ** 2, steer_rate ** 2,
             lateral ** 2, dev ** 2]
    return torch.stack([t.mean(-1) for t in terms], dim=-1)


def _plan_tensors(trajs, dtype=torch.float64):
    arr = np.stack([t.states if isinstance(t, VutFuturePlan) else np.asarray(t) for t in trajs])
    arr = torch.as_tensor(arr, dtype=dtype)
    return arr[..., :2], (arr[..., 2] if arr.shape[-1] >= 3 else None)


def features_array(trajs: Sequence[VutFuturePlan], scene) -> np.ndarray:
    """Feature matrix [n, 7] for several plans against one scene."""
    lanes = lane_table(scene)
    if not len(trajs):
        return np.zeros((0, N_FEATURES))
    xy, heading = _plan_tensors(trajs)
    with torch.no_grad():
        return feature_terms(xy, lanes, heading).numpy()


def extract_cost_features(traj: VutFuturePlan, scene) -> CostFeatureVector:
    return CostFeatureVector.from_array(features_array([traj], scene)[0])


def evaluate_cost(traj: VutFuturePlan, weights: CostWeights, scene) -> float:
    f = features_array([traj], scene)[0]
    return float(np.dot(weights.w, f))


def cost_tensor(xy: torch.Tensor, weights: CostWeights, lanes: LaneTable,
                heading: torch.Tensor | None = None) -> torch.Tensor:
    w = torch.tensor(weights.w.tolist(), dtype=xy.dtype)
    return (feature_terms(xy, lanes, heading) * w).sum(-1)


# ---------------------------------------------------------------------------
# weight fitting

def margin_objective(w: np.ndarray, deltas: np.ndarray, margin: float) -> float:
    if len(deltas) == 0:
        return 0.0
    return float(np.maximum(0.0, margin - deltas @ w).mean())


def fit_weights_from_features(truth_feats: Sequence[np.ndarray], candidate_feats: Sequence[np.ndarray],
                              init=None, margin: float = 0.1, learning_rate: float = 0.01,
                              steps: int = 300, tolerance: float = 1e-9) -> CostWeights:
    """Projected subgradient descent on the mean hinge ``max(0, margin - w . (f_c - f_truth))``.

    Steps are preconditioned per feature by the mean absolute feature gap so
    that features of very different scales move at comparable rates.
    """
    rows = []
    for ft, fc in zip(truth_feats, candidate_feats):
        d = np.asarray(fc, float) - np.asarray(ft, float)[None]
        rows.append(d[np.any(d != 0.0, axis=1)])
    deltas = np.vstack(rows) if rows else np.zeros((0, N_FEATURES))
    if len(deltas) == 0:
        raise FitError("degenerate demonstrations: every candidate matches the truth features")
    scale = np.abs(deltas).mean(axis=0)
    precond = np.divide(1.0, scale ** 2, out=np.zeros_like(scale), where=scale > 0)
    w = np.zeros(N_FEATURES) if init is None else np.maximum(np.asarray(
        init.w if isinstance(init, CostWeights) else init, float), 0.0)
    for _ in range(steps):
        if margin_objective(w, deltas, margin) <= tolerance:
            break
        active = (margin - deltas @ w) > 0
        grad = -deltas[active].sum(axis=0) / len(deltas)
        w = np.maximum(0.0, w - learning_rate * precond * grad)
    return CostWeights(w)


def fit_weights(demonstrations, candidate_sets, init=None, **kwargs) -> CostWeights:
    """Fit nonnegative weights so each demonstrated trajectory is cheaper than its alternatives.

    ``demonstrations`` is a list of ``(frame, truth_plan)``; ``candidate_sets``
    holds one list of plans per demonstration (the truth is added when absent).
    """
    if not demonstrations:
        raise FitError("need at least one demonstration")
    truth_feats, cand_feats = [], []
    for (frame, truth), cands in zip(demonstrations, candidate_sets):
        cands = list(getattr(cands, "candidates", cands))
        if not any(np.array_equal(c.states, truth.states) for c in cands):
            cands.append(truth)
        if len(cands) < 2:
            raise FitError("each demonstration needs at least 2 candidates")
        feats = features_array([truth] + cands, frame)
        truth_feats.append(feats[0])
        cand_feats.append(feats[1:])
    return fit_weights_from_features(truth_feats, cand_feats, init=init, **kwargs)


# ---------------------------------------------------------------------------
# distribution

def bayesian_update(prior: DistributionalCostWeights, observed_weights: Sequence[CostWeights],
                    obs_noise_var=DEFAULT_OBS_NOISE_VAR) -> DistributionalCostWeights:
    """Conjugate Gaussian update per weight with known observation noise."""
    noise = np.asarray(obs_noise_var, dtype=float).reshape(-1)
    if noise.shape != (N_FEATURES,) or np.any(noise <= 0) or not np.all(np.isfinite(noise)):
        raise ParameterError("observation noise variances must be 7 positive reals")
    n = len(observed_weights)
    if n == 0:
        return prior
    obs = np.stack([o.w if isinstance(o, CostWeights) else np.asarray(o, float) for o in observed_weights])
    precision = 1.0 / prior.sigma2 + n / noise
    mean = (prior.mu / prior.sigma2 + obs.sum(axis=0) / noise) / precision
    return DistributionalCostWeights(mean, 1.0 / precision)


def sample_key(dist: DistributionalCostWeights, seed: int) -> CostWeights:
    rng = np.random.default_rng(seed)
    draw = dist.mu + np.sqrt(dist.sigma2) * rng.standard_normal(N_FEATURES)
    return CostWeights(np.maximum(draw, 0.0))


def select_key(dist: DistributionalCostWeights, offsets) -> CostWeights:
    """Targeted key: ``mu + offsets * std`` clamped at zero."""
    off = np.asarray(offsets, dtype=float).reshape(-1)
    if off.shape != (N_FEATURES,):
        raise ParameterError("need one offset per feature")
    return CostWeights(np.maximum(dist.mu + off * dist.std, 0.0))


# ---------------------------------------------------------------------------
# key / distribution files

def _named(values: dict, where: str) -> np.ndarray:
    if not isinstance(values, dict) or set(values) != set(FEATURE_NAMES):
        raise ParameterError(f"{where}: expected exactly the weights {FEATURE_NAMES}")
    return np.array([float(values[n]) for n in FEATURE_NAMES])


def save_key(key: CostWeights, path) -> None:
    Path(path).write_text(json.dumps({"format": KEY_FORMAT, "weights": key.as_dict()}, indent=2) + "\n")


def load_key(path) -> CostWeights:
    data = json.loads(Path(path).read_text())
    if data.get("format") != KEY_FORMAT:
        raise ParameterError(f"{path}: expected format tag '{KEY_FORMAT}'")
    return CostWeights(_named(data.get("weights"), "weights"))


def distribution_to_dict(dist: DistributionalCostWeights) -> dict:
    return {"format": DISTRIBUTION_FORMAT,
            "weights": {n: {"mu": float(m), "sigma2": float(s)}
                        for n, m, s in zip(FEATURE_NAMES, dist.mu, dist.sigma2)}}


def distribution_from_dict(data: dict) -> DistributionalCostWeights:
    if data.get("format") != DISTRIBUTION_FORMAT:
        raise ParameterError(f"expected format tag '{DISTRIBUTION_FORMAT}'")
    w = data.get("weights")
    if not isinstance(w, dict) or set(w) != set(FEATURE_NAMES):
        raise ParameterError(f"expected exactly the weights {FEATURE_NAMES}")
    return DistributionalCostWeights([w[n]["mu"] for n in FEATURE_NAMES],
                                     [w[n]["sigma2"] for n in FEATURE_NAMES])


def save_distribution(dist: DistributionalCostWeights, path) -> None:
    Path(path).write_text(json.dumps(distribution_to_dict(dist), indent=2) + "\n")


def load_distribution(path) -> DistributionalCostWeights:
    return distribution_from_dict(json.loads(Path(path).read_text()))


def efficiency_sd_gap(dist: DistributionalCostWeights, a: CostWeights, b: CostWeights) -> float:
    """Distance between two keys' efficiency weights in posterior standard deviations."""
    return abs(a.w[EFFICIENCY] - b.w[EFFICIENCY]) / math.sqrt(dist.sigma2[EFFICIENCY])
