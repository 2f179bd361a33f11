"""Closed-loop rollouts (plan the VUT, infer the background, advance), key sweeps and trace export."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import PlannerConfig, SimConfig
from .cost import EFFICIENCY, CostWeights
from .decoder import ModelOutput
from .features import assemble_inputs
from .model import TrafficModel
from .planner import plan_vut_trajectory
from .scenario import (DT, HEADING, HISTORY_STEPS, LENGTH, VALID, VX, VY, WIDTH, X, Y, Scenario,
                       build_frame, to_global_points, to_local_frame, wrap_angle)

TRACE_HEADER = ("t", "agent_id", "x", "y", "heading", "speed")
VUT_ID = "vut"
CONFLICT_RADIUS = 2.0
# below this step speed the heading of a simulated agent is held
HEADING_HOLD_SPEED = 0.1


class RolloutError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"rollout failed at step {step}: {message}")
        self.step = step


@dataclass
class SimModel:
    """What a rollout needs from a checkpoint."""
    model: TrafficModel
    planner_cfg: PlannerConfig = field(default_factory=PlannerConfig)
    checkpoint_id: str = "in-memory"


@dataclass
class ReplanRecord:
    step: int
    key: np.ndarray
    vut_plan: np.ndarray            # [50, 2] global
    agent_ids: tuple
    trajectories: np.ndarray        # [10, K, 50, 2] global
    scores: np.ndarray              # [10, K]
    selected_modes: np.ndarray      # [10]


@dataclass
class SimulationTrace:
    scenario_id: str
    start_step: int
    agent_ids: tuple
    vut_states: np.ndarray          # [S + 1, 8]
    agent_states: np.ndarray        # [A, S + 1, 8]
    records: list
    seed: int
    key: np.ndarray
    checkpoint_id: str
    mode: str = "closed_loop"

    @property
    def n_steps(self) -> int:
        return len(self.vut_states) - 1

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_step + np.arange(len(self.vut_states))

    def agent_xy(self, agent_id) -> np.ndarray:
        return self.agent_states[self.agent_ids.index(agent_id), :, :2]


def _as_sim_model(checkpoint) -> SimModel:
    if isinstance(checkpoint, SimModel):
        return checkpoint
    if isinstance(checkpoint, TrafficModel):
        return SimModel(checkpoint)
    return SimModel(checkpoint.model, checkpoint.planner_cfg, checkpoint.checkpoint_id)


def _states_from_path(prev_state: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Full 8-field states along ``xy`` continuing from ``prev_state``; heading follows the motion."""
    out = np.zeros((len(xy), 8))
    last_xy, heading = prev_state[:2], prev_state[HEADING]
    for k, p in enumerate(xy):
        v = (p - last_xy) / DT
        if math.hypot(*v) > HEADING_HOLD_SPEED:
            heading = wrap_angle(math.atan2(v[1], v[0]))
        out[k] = (p[0], p[1], heading, v[0], v[1], prev_state[LENGTH], prev_state[WIDTH], 1.0)
        last_xy = p
    return out


def _plan_states_global(plan_states: np.ndarray, origin, prev_state: np.ndarray) -> np.ndarray:
    xy = to_global_points(plan_states[:, :2], origin)
    h = wrap_angle(plan_states[:, 2] + origin.heading)
    out = np.zeros((len(xy), 8))
    out[:, X], out[:, Y], out[:, HEADING] = xy[:, 0], xy[:, 1], h
    out[:, VX] = plan_states[:, 3] * np.cos(h)
    out[:, VY] = plan_states[:, 3] * np.sin(h)
    out[:, LENGTH], out[:, WIDTH], out[:, VALID] = prev_state[LENGTH], prev_state[WIDTH], 1.0
    return out


def _pick_modes(output: ModelOutput, sample: bool, rng: np.random.Generator) -> np.ndarray:
    scores = output.scores.numpy()
    if not sample:
        return np.argmax(scores, axis=-1)
    return np.array([rng.choice(len(s), p=s / s.sum()) for s in scores])


def rollout(scenario: Scenario, checkpoint, key: CostWeights, duration_steps: Optional[int] = None,
            seed: int = 0, cfg: SimConfig = SimConfig(), replay: bool = False) -> SimulationTrace:
    """Closed-loop simulation from ``cfg.start_step`` for ``duration_steps`` steps.

    Every ``cfg.replan_interval`` steps the VUT is replanned under ``key`` and
    the 10 nearest agents are re-inferred conditioned on that plan. Agents that
    were never selected replay their log; previously simulated agents keep
    following their last inferred path and hold its end point.

    ``replay=True`` injects the logged VUT future instead of planning and runs
    a single inference at the start (open loop), so the background equals
    single-shot inference on the initial frame.
    """
    sm = _as_sim_model(checkpoint)
    duration = cfg.duration_steps if duration_steps is None else int(duration_steps)
    start = cfg.start_step
    if start < HISTORY_STEPS - 1 or start >= scenario.duration_steps:
        raise RolloutError(start, f"start step needs {HISTORY_STEPS} steps of history inside the scenario")
    if duration < 0:
        raise RolloutError(start, "duration must be non-negative")
    rng = np.random.default_rng(seed)
    T_log = scenario.duration_steps
    total = start + duration + 1
    vut = np.zeros((total, 8))
    agents = np.zeros((len(scenario.agent_ids), total, 8))
    vut[:start + 1] = scenario.vut_track[:start + 1]
    agents[:, :start + 1] = scenario.agent_tracks[:, :start + 1]
    # active inferred paths: agent index -> (first step, global xy [n, 2])
    paths: dict = {}
    vut_path = None
    records = []
    interval = cfg.replan_interval if cfg.replan_interval > 0 and not replay else max(duration, 1)
    index = {aid: i for i, aid in enumerate(scenario.agent_ids)}
    for t in range(start, start + duration):
        if (t - start) % interval == 0:
            world = Scenario(scenario.scenario_id, vut[:t + 1], agents[:, :t + 1], scenario.agent_ids,
                             scenario.lanes, scenario.crosswalks, scenario.conflict_point,
                             scenario.principal_agent_id)
            frame = build_frame(world, t)
            local = to_local_frame(frame)
            if replay:
                plan_states = to_local_frame(build_frame(scenario, t)).vut_future_truth.states
            else:
                try:
                    plan_states = plan_vut_trajectory(local, key, sm.planner_cfg).states
                except Exception as exc:  # noqa: BLE001 - surface with the step index
                    raise RolloutError(t, str(exc)) from exc
            vut_path = (t + 1, _plan_states_global(plan_states, local.origin, vut[t]))
            inputs = assemble_inputs(local, sm.model.cfg, vut_future=plan_states)
            out = sm.model.infer(inputs)
            modes = _pick_modes(out, cfg.sample_modes, rng)
            trajs = out.trajectories.numpy()
            global_trajs = to_global_points(trajs.reshape(-1, 2), local.origin).reshape(trajs.shape)
            for slot, aid in enumerate(frame.agent_ids):
                if aid is not None:
                    paths[index[aid]] = (t + 1, global_trajs[slot, modes[slot]])
            records.append(ReplanRecord(t, np.array(key.w), vut_path[1][:, :2].copy(), frame.agent_ids,
                                        np.where(np.asarray(frame.agent_mask)[:, None, None, None],
                                                 global_trajs, 0.0), out.scores.numpy().copy(), modes))
        # advance one step
        k = t + 1 - vut_path[0]
        vut[t + 1] = vut_path[1][min(k, len(vut_path[1]) - 1)]
        if k >= len(vut_path[1]):
            vut[t + 1, VX:VY + 1] = 0.0
        for i in range(len(scenario.agent_ids)):
            if i in paths:
                first, xy = paths[i]
                p = xy[min(t + 1 - first, len(xy) - 1)]
                agents[i, t + 1] = _states_from_path(agents[i, t], p[None])[0]
            elif t + 1 < T_log:
                agents[i, t + 1] = scenario.agent_tracks[i, t + 1]
            else:
                agents[i, t + 1] = agents[i, t]
                agents[i, t + 1, VX:VY + 1] = 0.0
    return SimulationTrace(scenario.scenario_id, start, tuple(scenario.agent_ids), vut[start:],
                           agents[:, start:], records, seed, np.array(key.w),
                           sm.checkpoint_id, "replay" if replay else "closed_loop")


# ---------------------------------------------------------------------------
# diversity

def first_arrival(xy: np.ndarray, valid: np.ndarray, point, radius: float = CONFLICT_RADIUS) -> Optional[int]:
    d = np.hypot(xy[:, 0] - point[0], xy[:, 1] - point[1])
    hit = np.flatnonzero((d <= radius) & valid)
    return int(hit[0]) if len(hit) else None


def conflict_flag(trace: SimulationTrace, agent_id, point) -> str:
    """'before' / 'after' the VUT at the conflict point, or 'none' when the agent never reaches it."""
    i = trace.agent_ids.index(agent_id)
    t_agent = first_arrival(trace.agent_states[i, :, :2], trace.agent_states[i, :, VALID] != 0, point)
    t_vut = first_arrival(trace.vut_states[:, :2], np.ones(len(trace.vut_states), bool), point)
    if t_agent is None:
        return "none"
    if t_vut is None or t_agent < t_vut:
        return "before"
    return "after"


def vut_progress(trace: SimulationTrace) -> float:
    return float(np.linalg.norm(np.diff(trace.vut_states[:, :2], axis=0), axis=1).sum())


def pair_divergence(a: SimulationTrace, b: SimulationTrace) -> dict:
    """Per-agent mean and max displacement between two traces at matched timestamps."""
    out = {}
    for i, aid in enumerate(a.agent_ids):
        both = (a.agent_states[i, :, VALID] != 0) & (b.agent_states[i, :, VALID] != 0)
        d = np.linalg.norm(a.agent_states[i, :, :2] - b.agent_states[i, :, :2], axis=1)[both]
        out[str(aid)] = {"mean": float(d.mean()) if len(d) else 0.0, "max": float(d.max()) if len(d) else 0.0}
    return out


@dataclass
class DivergenceReport:
    keys: list                   # list of 7-vectors
    pairs: dict                  # "i-j" -> {agent_id: {"mean", "max"}}
    vut_progress: list
    conflict_flags: list         # per key: {agent_id: flag}
    principal_agent_id: object = None

    def mean_divergence(self, i: int, j: int, agent_id) -> float:
        a, b = sorted((i, j))
        return self.pairs[f"{a}-{b}"][str(agent_id)]["mean"]

    def matrix(self, agent_id) -> np.ndarray:
        n = len(self.keys)
        m = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                m[i, j] = m[j, i] = self.mean_divergence(i, j, agent_id)
        return m

    def to_dict(self) -> dict:
        d = {"keys": [list(map(float, k)) for k in self.keys], "pairs": self.pairs,
             "vut_progress": self.vut_progress, "conflict_flags": self.conflict_flags,
             "principal_agent_id": None if self.principal_agent_id is None else str(self.principal_agent_id)}
        if self.principal_agent_id is not None:
            d["principal_divergence_matrix"] = self.matrix(self.principal_agent_id).tolist()
        return d

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def diversity_sweep(scenario: Scenario, checkpoint, keys: Sequence[CostWeights], duration_steps=None,
                    seed: int = 0, cfg: SimConfig = SimConfig()) -> tuple[DivergenceReport, list]:
    """One rollout per key with a shared seed, then pairwise divergence and conflict-point flags."""
    if len(keys) < 2:
        raise ValueError("a sweep needs at least 2 keys")
    traces = [rollout(scenario, checkpoint, k, duration_steps, seed, cfg) for k in keys]
    pairs = {}
    for i in range(len(traces)):
        for j in range(i + 1, len(traces)):
            pairs[f"{i}-{j}"] = pair_divergence(traces[i], traces[j])
    flags = []
    cp = scenario.conflict_point
    for tr in traces:
        if cp is None:
            flags.append({})
            continue
        ids = [cp.agent_id] if cp.agent_id is not None else list(tr.agent_ids)
        flags.append({str(a): conflict_flag(tr, a, (cp.x, cp.y)) for a in ids if a in tr.agent_ids})
    principal = scenario.principal_agent_id
    if principal is None and cp is not None:
        principal = cp.agent_id
    report = DivergenceReport([np.array(k.w) for k in keys], pairs, [vut_progress(t) for t in traces], flags,
                              principal)
    return report, traces


def efficiency_keys(base: CostWeights, values: Sequence[float]) -> list[CostWeights]:
    out = []
    for v in values:
        w = np.array(base.w)
        w[EFFICIENCY] = v
        out.append(CostWeights(w))
    return out


# ---------------------------------------------------------------------------
# export

def trace_rows(trace: SimulationTrace):
    for k, t in enumerate(trace.timestamps):
        s = trace.vut_states[k]
        yield (int(t), VUT_ID, s[X], s[Y], s[HEADING], math.hypot(s[VX], s[VY]))
        for i, aid in enumerate(trace.agent_ids):
            s = trace.agent_states[i, k]
            if s[VALID] != 0:
                yield (int(t), str(aid), s[X], s[Y], s[HEADING], math.hypot(s[VX], s[VY]))


def write_trace_csv(trace: Optional[SimulationTrace], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        if trace is None:
            return
        for t, aid, x, y, h, v in trace_rows(trace):
            w.writerow((t, aid, f"{x:.9f}", f"{y:.9f}", f"{h:.9f}", f"{v:.9f}"))


def read_trace_csv(path) -> list[tuple]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != TRACE_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(int(t), aid, float(x), float(y), float(h), float(v)) for t, aid, x, y, h, v in r]


def plot_trace(trace: SimulationTrace, scenario: Optional[Scenario], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "vutsim", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7, 7))
        if scenario is not None:
            for lane in scenario.lanes:
                c = lane.centers
                ax.plot(c[:, 0], c[:, 1], color="0.8", lw=0.8, zorder=0)
            for cw in scenario.crosswalks:
                p = np.vstack([cw.perimeter, cw.perimeter[:1]])
                ax.plot(p[:, 0], p[:, 1], color="0.6", lw=0.8, ls="--", zorder=0)
            if scenario.conflict_point is not None:
                ax.plot([scenario.conflict_point.x], [scenario.conflict_point.y], "kx", ms=8)
        ax.plot(trace.vut_states[:, X], trace.vut_states[:, Y], color="tab:red", lw=2, label="VUT")
        for i, aid in enumerate(trace.agent_ids):
            s = trace.agent_states[i]
            ok = s[:, VALID] != 0
            if ok.any():
                ax.plot(s[ok, X], s[ok, Y], lw=1, label=str(aid))
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_title(f"{trace.scenario_id} ({trace.mode})")
        ax.legend(fontsize=6, loc="best")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def export_trace(trace: SimulationTrace, out_dir, scenario: Optional[Scenario] = None,
                 extra_manifest: Optional[dict] = None) -> dict:
    """Write trace.csv, trace.svg and manifest.json into ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"trace": out / "trace.csv", "plot": out / "trace.svg", "manifest": out / "manifest.json"}
        write_trace_csv(trace, paths["trace"])
        plot_trace(trace, scenario, paths["plot"])
        manifest = {"scenario_id": trace.scenario_id, "seed": trace.seed, "key": list(map(float, trace.key)),
                    "checkpoint_id": trace.checkpoint_id, "mode": trace.mode, "start_step": trace.start_step,
                    "steps": trace.n_steps, "replans": [r.step for r in trace.records]}
        manifest.update(extra_manifest or {})
        paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"{exc.filename or out}: {exc.strerror or exc}") from exc
    return {k: str(v) for k, v in paths.items()}
