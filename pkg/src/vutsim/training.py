"""Composite loss, the alternating training loop, checkpoints and ADE/FDE evaluation."""
from __future__ import annotations

import dataclasses
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import EngineConfig, ModelConfig, PlannerConfig, TrainingConfig, config_from_dict
from .cost import (DEFAULT_OBS_NOISE_VAR, DEFAULT_PRIOR, CostWeights, DistributionalCostWeights,
                   bayesian_update, distribution_from_dict, distribution_to_dict, features_array,
                   fit_weights_from_features, lane_table, sample_key)
from .decoder import ModelOutput, select_most_likely
from .features import InputTensors, assemble_inputs, collate
from .model import TrafficModel, build_model
from .numeric import CheckpointError, NumericError, ParamStore, config_hash, load_checkpoint, save_checkpoint
from .planner import generate_candidates, plan_vut_trajectory
from .scenario import Frame, VutFuturePlan, to_local_frame

CHECKPOINT_FORMAT = "vcdi-checkpoint/v1"
SINGLE_VALUED_VAR = 1e-12
LOG_HEADER = "step,total,prediction,score,imitation,planning_cost,wall_time"
FDE_STEPS = {"fde_1s": 10, "fde_3s": 30, "fde_5s": 50}


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss terms

def smooth_l1(d: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Huber-style kernel: 0.5 d^2 / beta for |d| < beta, |d| - 0.5 beta otherwise."""
    a = d.abs()
    return torch.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def _valid_agents(mask, valid):
    return mask & valid.any(-1)


def closest_mode(output: ModelOutput, truth, valid) -> torch.Tensor:
    """Index of the mode with the smallest mean displacement over valid steps -> [..., 10]."""
    err = torch.linalg.vector_norm(output.trajectories - truth.unsqueeze(-3), dim=-1)
    w = valid.unsqueeze(-2).to(err.dtype)
    ade = (err * w).sum(-1) / w.sum(-1).clamp(min=1.0)
    return torch.argmin(ade.detach(), dim=-1)


def prediction_loss(output: ModelOutput, truth, valid, mask=None) -> torch.Tensor:
    """Smooth-L1 (summed over x, y) of the closest mode, averaged over valid agent steps."""
    mask = output.agent_mask if mask is None else mask
    agents = _valid_agents(mask, valid)
    steps = valid & agents.unsqueeze(-1)
    n = steps.sum()
    if n == 0:
        return output.trajectories.sum() * 0.0
    k = closest_mode(output, truth, steps)
    idx = k[..., None, None, None].expand(*k.shape, 1, *output.trajectories.shape[-2:])
    best = torch.gather(output.trajectories, -3, idx).squeeze(-3)
    per_step = smooth_l1(best - truth).sum(-1)
    return torch.where(steps, per_step, torch.zeros_like(per_step)).sum() / n


def score_loss(output: ModelOutput, truth, valid, mask=None) -> torch.Tensor:
    """Cross-entropy of the scores against the closest mode, averaged over valid agents."""
    mask = output.agent_mask if mask is None else mask
    agents = _valid_agents(mask, valid)
    n = agents.sum()
    if n == 0:
        return output.scores.sum() * 0.0
    k = closest_mode(output, truth, valid & agents.unsqueeze(-1))
    logp = torch.log(output.scores.clamp(min=torch.finfo(output.scores.dtype).tiny))
    nll = -torch.gather(logp, -1, k.unsqueeze(-1)).squeeze(-1)
    return torch.where(agents, nll, torch.zeros_like(nll)).sum() / n


def imitation_loss(planned, truth) -> float:
    """Mean squared positional error between two 50-step plans."""
    a = planned.xy if isinstance(planned, VutFuturePlan) else np.asarray(planned)[..., :2]
    b = truth.xy if isinstance(truth, VutFuturePlan) else np.asarray(truth)[..., :2]
    return float(((a - b) ** 2).sum(-1).mean())


def planning_cost_term(planned: VutFuturePlan, weights: CostWeights, scene) -> float:
    return float(features_array([planned], scene)[0] @ weights.w)


# ---------------------------------------------------------------------------
# prepared training examples

@dataclass
class Example:
    """A local-frame frame with everything the loop needs precomputed."""
    frame: Frame
    inputs: InputTensors
    truth_features: np.ndarray      # [7] cost features of the logged VUT future
    candidate_features: np.ndarray  # [n, 7] lattice candidates
    plan: Optional[VutFuturePlan] = None
    plan_features: Optional[np.ndarray] = None


def prepare_examples(frames: Sequence[Frame], model_cfg: ModelConfig = ModelConfig(),
                     planner_cfg: PlannerConfig = PlannerConfig()) -> list[Example]:
    out = []
    for f in frames:
        lf = f if f.is_local else to_local_frame(f)
        table = lane_table(lf)
        cands = generate_candidates(lf, planner_cfg).candidates
        out.append(Example(lf, assemble_inputs(lf, model_cfg), features_array([lf.vut_future_truth], table)[0],
                           features_array(cands, table)))
    return out


def refresh_plans(examples: Sequence[Example], key: CostWeights, planner_cfg: PlannerConfig) -> None:
    for ex in examples:
        ex.plan = plan_vut_trajectory(ex.frame, key, planner_cfg)
        ex.plan_features = features_array([ex.plan], ex.frame)[0]


def batch_tensors(examples: Sequence[Example], dtype=torch.float32):
    batch = collate([ex.inputs for ex in examples], dtype=dtype)
    truth = torch.as_tensor(np.stack([ex.frame.agent_futures_truth for ex in examples]), dtype=dtype)
    valid = torch.as_tensor(np.stack([ex.frame.agent_future_valid for ex in examples]))
    return batch, truth, valid


@dataclass
class LossTerms:
    prediction: torch.Tensor
    score: torch.Tensor
    imitation: float
    planning_cost: float

    def values(self) -> tuple:
        return (float(self.prediction.detach()), float(self.score.detach()), self.imitation, self.planning_cost)


def loss_terms(model: TrafficModel, examples: Sequence[Example], key: CostWeights,
               batch=None) -> LossTerms:
    """Evaluate the four loss terms on ``examples``; the VUT plans must already be cached."""
    if batch is None:
        batch = batch_tensors(examples, next(model.parameters()).dtype)
    inputs, truth, valid = batch
    out = model(inputs)
    imit = float(np.mean([imitation_loss(ex.plan, ex.frame.vut_future_truth) for ex in examples]))
    plan_cost = float(np.mean([ex.plan_features @ key.w for ex in examples]))
    return LossTerms(prediction_loss(out, truth, valid), score_loss(out, truth, valid), imit, plan_cost)


def combine(terms: LossTerms, lambdas) -> torch.Tensor:
    l1, l2, l3, l4 = lambdas
    return l1 * terms.prediction + l2 * terms.score + (l3 * terms.imitation + l4 * terms.planning_cost)


def composite_loss(model: TrafficModel, examples: Sequence[Example], key: CostWeights,
                   cfg: TrainingConfig, batch=None) -> torch.Tensor:
    """lambda-weighted sum of prediction, score, imitation and planning-cost terms.

    The imitation and planning-cost terms depend on the planner output, which is
    a function of the cost weights only, so they carry no gradient to the network.
    """
    return combine(loss_terms(model, examples, key, batch), cfg.lambdas)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainingResult:
    model: TrafficModel
    distribution: DistributionalCostWeights
    log: list = field(default_factory=list)   # (step, total, pred, score, imit, plan, wall)
    model_cfg: ModelConfig = field(default_factory=ModelConfig)
    train_cfg: TrainingConfig = field(default_factory=TrainingConfig)
    planner_cfg: PlannerConfig = field(default_factory=PlannerConfig)

    def log_text(self) -> str:
        rows = [LOG_HEADER] + [f"{s},{t:.9g},{a:.9g},{b:.9g},{c:.9g},{d:.9g},{w:.3f}"
                               for s, t, a, b, c, d, w in self.log]
        return "\n".join(rows) + "\n"


def initial_distribution(ablation: str, prior: DistributionalCostWeights = DEFAULT_PRIOR):
    if ablation == "single_valued":
        return DistributionalCostWeights(prior.mu, np.full_like(prior.sigma2, SINGLE_VALUED_VAR))
    return prior


def _pin(dist: DistributionalCostWeights, ablation: str) -> DistributionalCostWeights:
    if ablation == "single_valued":
        return DistributionalCostWeights(dist.mu, np.full_like(dist.sigma2, SINGLE_VALUED_VAR))
    return dist


def learning_rate_at(step: int, cfg: TrainingConfig) -> float:
    """Constant, then linear decay to 10% over the last (1 - lr_decay_start) of training."""
    start = cfg.lr_decay_start * cfg.steps
    if cfg.steps == 0 or step < start:
        return cfg.learning_rate
    frac = (step - start) / max(cfg.steps - start, 1.0)
    return cfg.learning_rate * (1.0 - 0.9 * frac)


def fit_and_update(examples: Sequence[Example], dist: DistributionalCostWeights, rng: np.random.Generator,
                   cfg: TrainingConfig, obs_noise_var=DEFAULT_OBS_NOISE_VAR) -> DistributionalCostWeights:
    """One margin fit on a seeded subset of frames, then one Bayesian update with the fit as observation."""
    idx = np.sort(rng.choice(len(examples), size=min(cfg.fit_subset, len(examples)), replace=False))
    usable = [examples[i] for i in idx if np.any(examples[i].candidate_features != examples[i].truth_features)]
    if not usable:
        return dist
    fitted = fit_weights_from_features([ex.truth_features for ex in usable],
                                       [ex.candidate_features for ex in usable], init=dist.mean_key())
    return _pin(bayesian_update(dist, [fitted], obs_noise_var), cfg.ablation)


def train(frames: Sequence[Frame], train_cfg: TrainingConfig = TrainingConfig(),
          model_cfg: ModelConfig = ModelConfig(), planner_cfg: PlannerConfig = PlannerConfig(),
          prior: DistributionalCostWeights = DEFAULT_PRIOR, examples: Optional[Sequence[Example]] = None,
          dtype=torch.float32, log_every: int = 1) -> TrainingResult:
    """Alternate network updates with cost-weight fitting; deterministic for a fixed seed.

    The network is conditioned on the logged VUT future. Every ``fit_interval``
    steps the weights are refit on a subset of frames, the distribution is
    updated and the cached VUT plans are recomputed under the new mean key.

    Update rule (heavy-ball momentum after global-norm clipping of g):
    ``v <- momentum * v + g``, ``theta <- theta - lr * v``.
    """
    if not frames and not examples:
        raise TrainingError("training needs at least one frame")
    train_cfg.validate()
    model_cfg = dataclasses.replace(model_cfg, no_augment=train_cfg.ablation == "no_augment")
    if examples is None:
        examples = prepare_examples(frames, model_cfg, planner_cfg)
    model = build_model(model_cfg, seed=train_cfg.seed, dtype=dtype)
    dist = initial_distribution(train_cfg.ablation, prior)
    refresh_plans(examples, dist.mean_key(), planner_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    fit_rng = np.random.default_rng([train_cfg.seed, 1])
    opt = torch.optim.SGD(model.parameters(), lr=train_cfg.learning_rate, momentum=train_cfg.momentum)
    full_batch = batch_tensors(examples, dtype) if train_cfg.batch_size >= len(examples) else None
    result = TrainingResult(model, dist, [], model_cfg, train_cfg, planner_cfg)
    t_start = time.perf_counter()
    order = np.array([], dtype=int)
    for step in range(train_cfg.steps):
        if step > 0 and step % train_cfg.fit_interval == 0:
            dist = fit_and_update(examples, dist, fit_rng, train_cfg)
            refresh_plans(examples, dist.mean_key(), planner_cfg)
        if full_batch is not None:
            chosen, batch = list(examples), full_batch
        else:
            if len(order) < train_cfg.batch_size:
                order = np.concatenate([order, rng.permutation(len(examples))])
            pick, order = order[:train_cfg.batch_size], order[train_cfg.batch_size:]
            chosen = [examples[i] for i in pick]
            batch = batch_tensors(chosen, dtype)
        key = dist.mean_key() if train_cfg.ablation == "single_valued" else \
            sample_key(dist, int(rng.integers(2 ** 31)))
        for g in opt.param_groups:
            g["lr"] = learning_rate_at(step, train_cfg)
        opt.zero_grad()
        terms = loss_terms(model, chosen, key, batch)
        total = combine(terms, train_cfg.lambdas)
        for name, value in zip(("prediction", "score", "imitation", "planning_cost"), terms.values()):
            if not np.isfinite(value):
                raise NumericError(f"step {step} term {name}", "non-finite loss")
        total.backward()
        if train_cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        opt.step()
        if step % log_every == 0 or step == train_cfg.steps - 1:
            result.log.append((step, float(total.detach()), *terms.values(), time.perf_counter() - t_start))
    result.distribution = dist
    return result


def total_loss(model: TrafficModel, examples: Sequence[Example], dist: DistributionalCostWeights,
               cfg: TrainingConfig) -> float:
    """Composite loss on ``examples`` under the mean key (no sampling noise), for before/after comparisons."""
    with torch.no_grad():
        return float(composite_loss(model, examples, dist.mean_key(), cfg))


# ---------------------------------------------------------------------------
# checkpoints

def checkpoint_metadata(model_cfg: ModelConfig, train_cfg: TrainingConfig, planner_cfg: PlannerConfig,
                        dist: DistributionalCostWeights, steps_done: int) -> dict:
    cfg = {"model": dataclasses.asdict(model_cfg), "training": dataclasses.asdict(train_cfg),
           "planner": dataclasses.asdict(planner_cfg)}
    return {"format": CHECKPOINT_FORMAT, "config": cfg, "config_hash": config_hash(cfg),
            "distribution": distribution_to_dict(dist), "steps": steps_done}


def save_training_checkpoint(result: TrainingResult, path) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in result.model.state_dict().items()}
    meta = checkpoint_metadata(result.model_cfg, result.train_cfg, result.planner_cfg, result.distribution,
                               result.train_cfg.steps)
    save_checkpoint(path, arrays, meta)


@dataclass
class LoadedCheckpoint:
    model: TrafficModel
    distribution: DistributionalCostWeights
    model_cfg: ModelConfig
    planner_cfg: PlannerConfig
    metadata: dict
    checkpoint_id: str


def checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def load_training_checkpoint(path, dtype=torch.float64) -> LoadedCheckpoint:
    arrays, meta = load_checkpoint(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a model checkpoint")
    cfg: EngineConfig = config_from_dict({"model": meta["config"]["model"],
                                          "planner": _tuple_fields(meta["config"]["planner"])})
    model = build_model(cfg.model, dtype=dtype)
    ParamStore(model).load_state(arrays)
    model.eval()
    return LoadedCheckpoint(model, distribution_from_dict(meta["distribution"]), cfg.model, cfg.planner, meta,
                            checkpoint_id(path))


def _tuple_fields(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class Metrics:
    ade: float
    fde_1s: float
    fde_3s: float
    fde_5s: float
    n_frames: int
    n_agents: int

    def report(self) -> dict:
        return {"ade": self.ade, "fde_1s": self.fde_1s, "fde_3s": self.fde_3s, "fde_5s": self.fde_5s}


def displacement_metrics(pred, truth, valid, mask) -> Metrics:
    """pred/truth [F, 10, 50, 2]; valid [F, 10, 50]; mask [F, 10]. Means over valid agent steps."""
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    steps = np.asarray(valid, bool) & np.asarray(mask, bool)[..., None]
    err = np.linalg.norm(pred - truth, axis=-1)
    ade = float(err[steps].mean()) if steps.any() else 0.0
    fde = {}
    for name, k in FDE_STEPS.items():
        sel = steps[..., k - 1]
        fde[name] = float(err[..., k - 1][sel].mean()) if sel.any() else 0.0
    return Metrics(ade, fde["fde_1s"], fde["fde_3s"], fde["fde_5s"], int(pred.shape[0]),
                   int((steps.any(-1)).sum()))


def evaluate_ade_fde(model: TrafficModel, frames_or_examples, batch_size: int = 64) -> Metrics:
    """ADE/FDE of the most likely mode, conditioned on the logged VUT future."""
    items = list(frames_or_examples)
    frames = [it.frame if isinstance(it, Example) else (it if it.is_local else to_local_frame(it)) for it in items]
    inputs = [it.inputs if isinstance(it, Example) else assemble_inputs(f, model.cfg)
              for it, f in zip(items, frames)]
    dtype = next(model.parameters()).dtype
    preds = []
    with torch.no_grad():
        for i in range(0, len(inputs), batch_size):
            out = model(collate(inputs[i:i + batch_size], dtype=dtype))
            preds.append(select_most_likely(out).double().numpy())
    if not preds:
        return Metrics(0.0, 0.0, 0.0, 0.0, 0, 0)
    truth = np.stack([f.agent_futures_truth for f in frames])
    valid = np.stack([f.agent_future_valid for f in frames])
    mask = np.stack([np.asarray(f.agent_mask, bool) for f in frames])
    return displacement_metrics(np.concatenate(preds), truth, valid, mask)
