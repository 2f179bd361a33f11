"""Fixed-shape model inputs and the scene / history / VUT-future encoders.

History feature order (last axis of ``agent_history``):
``x, y, heading, vx, vy, length, width, valid``. Slot 0 is the VUT, slots
1-10 the selected background agents.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .layers import MLP, MultiHeadAttention, masked_max
from .scenario import FUTURE_STEPS, HISTORY_STEPS, MAX_AGENTS, Frame

N_SLOTS = MAX_AGENTS + 1
HISTORY_FEATURES = ("x", "y", "heading", "vx", "vy", "length", "width", "valid")
LANE_FEATURES = ("cx", "cy", "lx", "ly", "rx", "ry", "heading", "speed_limit",
                 "signal_none", "signal_green", "signal_yellow", "signal_red")
FUTURE_FEATURES = ("x", "y", "heading", "speed")

# fixed input scaling so every feature is O(1) for scenes a few tens of meters across
HISTORY_SCALE = (20.0, 20.0, 1.0, 10.0, 10.0, 5.0, 5.0, 1.0)
LANE_SCALE = (20.0,) * 6 + (1.0, 10.0) + (1.0,) * 4
CROSSWALK_SCALE = (20.0, 20.0)
FUTURE_SCALE = (20.0, 20.0, 1.0, 10.0)
HISTORY_HEADING, LANE_HEADING, FUTURE_HEADING = 2, 6, 2


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class SceneContext:
    lanes: np.ndarray           # [11, L, W, 12]
    lane_mask: np.ndarray       # [11, L, W]
    crosswalks: np.ndarray      # [11, C, P, 2]
    crosswalk_mask: np.ndarray  # [11, C, P]


@dataclass(frozen=True)
class InputTensors:
    agent_history: np.ndarray   # [11, 20, 8]
    agent_mask: np.ndarray      # [11]
    lanes: np.ndarray
    lane_mask: np.ndarray
    crosswalks: np.ndarray
    crosswalk_mask: np.ndarray
    vut_future: np.ndarray      # [50, 4]

    @property
    def scene(self) -> SceneContext:
        return SceneContext(self.lanes, self.lane_mask, self.crosswalks, self.crosswalk_mask)

    def replace_future(self, vut_future) -> "InputTensors":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["vut_future"] = np.asarray(vut_future, dtype=float)
        return InputTensors(**d)


def _lane_rows(lane) -> np.ndarray:
    wp = lane.waypoints
    onehot = np.eye(4)[wp[:, 8].astype(int)]
    return np.hstack([wp[:, :8], onehot])


def build_scene_context(frame: Frame, positions: np.ndarray, valid: np.ndarray, cfg: ModelConfig) -> SceneContext:
    """Per-agent local maps: the L lanes and C crosswalks nearest each agent's t0 position."""
    L, W, C, P = cfg.n_lanes, cfg.n_lane_points, cfg.n_crosswalks, cfg.n_crosswalk_points
    lanes = np.zeros((N_SLOTS, L, W, len(LANE_FEATURES)))
    lane_mask = np.zeros((N_SLOTS, L, W), dtype=bool)
    cws = np.zeros((N_SLOTS, C, P, 2))
    cw_mask = np.zeros((N_SLOTS, C, P), dtype=bool)
    lane_rows = [_lane_rows(l) for l in frame.lanes]
    back = W // 6
    for a in range(N_SLOTS):
        if not valid[a]:
            continue
        p = positions[a]
        near = []
        for li, lane in enumerate(frame.lanes):
            d2 = ((lane.centers - p) ** 2).sum(1)
            i = int(np.argmin(d2))
            near.append((float(d2[i]), li, i))
        near.sort()
        for slot, (_, li, i) in enumerate(near[:L]):
            rows = lane_rows[li]
            start = int(np.clip(i - back, 0, max(0, len(rows) - W)))
            chunk = rows[start:start + W]
            lanes[a, slot, :len(chunk)] = chunk
            lane_mask[a, slot, :len(chunk)] = True
        near_cw = sorted((float(((cw.perimeter - p) ** 2).sum(1).min()), ci)
                         for ci, cw in enumerate(frame.crosswalks))
        for slot, (_, ci) in enumerate(near_cw[:C]):
            pts = frame.crosswalks[ci].perimeter[:P]
            cws[a, slot, :len(pts)] = pts
            cw_mask[a, slot, :len(pts)] = True
    return SceneContext(lanes, lane_mask, cws, cw_mask)


def assemble_inputs(frame: Frame, cfg: ModelConfig = ModelConfig(), vut_future=None) -> InputTensors:
    """Lay a local-frame Frame out as fixed-shape arrays; ``vut_future`` overrides the truth plan."""
    if not frame.is_local:
        raise ContractError("assemble_inputs needs a frame in the VUT local frame (call to_local_frame)")
    hist = np.zeros((N_SLOTS, HISTORY_STEPS, len(HISTORY_FEATURES)))
    hist[0] = frame.vut_history
    hist[1:] = frame.agent_histories
    mask = np.concatenate([[True], np.asarray(frame.agent_mask, dtype=bool)])
    hist[~mask] = 0.0
    scene = build_scene_context(frame, hist[:, -1, :2], mask, cfg)
    fut = frame.vut_future_truth.states if vut_future is None else getattr(vut_future, "states", vut_future)
    return InputTensors(hist, mask, scene.lanes, scene.lane_mask, scene.crosswalks, scene.crosswalk_mask,
                        np.array(fut, dtype=float))


def heading_to_unit(x: torch.Tensor, col: int) -> torch.Tensor:
    """Replace the heading column by (cos, sin) so that headings of -pi and pi encode identically."""
    h = x[..., col:col + 1]
    return torch.cat([x[..., :col], torch.cos(h), torch.sin(h), x[..., col + 1:]], dim=-1)


def collate(items, dtype=torch.float64) -> dict:
    """Stack InputTensors into a batch of torch tensors keyed by field name."""
    out = {}
    for f in fields(InputTensors):
        arr = np.stack([getattr(it, f.name) for it in items])
        out[f.name] = torch.as_tensor(arr, dtype=torch.bool if arr.dtype == bool else dtype)
    return out


# ---------------------------------------------------------------------------
# encoders

class SceneEncoder(nn.Module):
    """Shared per-waypoint perceptron, max-pooled over the valid points of each element."""

    def __init__(self, d_model: int):
        super().__init__()
        self.lane_mlp = MLP(len(LANE_FEATURES) + 1, d_model, d_model)
        self.crosswalk_mlp = MLP(2, d_model, d_model)
        self.register_buffer("lane_scale", torch.tensor(LANE_SCALE), persistent=False)
        self.register_buffer("cw_scale", torch.tensor(CROSSWALK_SCALE), persistent=False)

    def forward(self, lanes, lane_mask, crosswalks, crosswalk_mask):
        lanes = torch.where(lane_mask.unsqueeze(-1), lanes, torch.zeros_like(lanes))
        crosswalks = torch.where(crosswalk_mask.unsqueeze(-1), crosswalks, torch.zeros_like(crosswalks))
        lane_h = self.lane_mlp(heading_to_unit(lanes / self.lane_scale.to(lanes.dtype), LANE_HEADING))
        cw_h = self.crosswalk_mlp(crosswalks / self.cw_scale.to(crosswalks.dtype))
        return masked_max(lane_h, lane_mask, dim=-2), masked_max(cw_h, crosswalk_mask, dim=-2)


class HistoryEncoder(nn.Module):
    """Shared LSTM over the 20 history steps; the final hidden state embeds the agent."""

    def __init__(self, d_model: int):
        super().__init__()
        self.lstm = nn.LSTM(len(HISTORY_FEATURES) + 1, d_model, batch_first=True)
        self.register_buffer("scale", torch.tensor(HISTORY_SCALE), persistent=False)

    def forward(self, history, agent_mask):
        step_valid = agent_mask.unsqueeze(-1) & (history[..., 7] > 0.5)
        x = heading_to_unit(history / self.scale.to(history.dtype), HISTORY_HEADING)
        x = torch.where(step_valid.unsqueeze(-1), x, torch.zeros_like(x))
        lead = x.shape[:-2]
        _, (h, _) = self.lstm(x.reshape(-1, HISTORY_STEPS, x.shape[-1]))
        emb = h[-1].reshape(*lead, -1)
        return torch.where(agent_mask.unsqueeze(-1), emb, torch.zeros_like(emb))


def causal_mask(n: int = FUTURE_STEPS) -> torch.Tensor:
    return torch.tril(torch.ones(n, n, dtype=torch.bool))


class FutureEncoder(nn.Module):
    """LSTM over the 50 planned VUT steps followed by one causal self-attention layer."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.lstm = nn.LSTM(len(FUTURE_FEATURES) + 1, d_model, batch_first=True)
        self.norm = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.register_buffer("scale", torch.tensor(FUTURE_SCALE), persistent=False)

    def forward(self, future, action_mask=None, return_weights: bool = False):
        h, _ = self.lstm(heading_to_unit(future / self.scale.to(future.dtype), FUTURE_HEADING))
        if action_mask is None:
            action_mask = causal_mask(h.shape[-2]).to(h.device)
        mask = action_mask.expand(*h.shape[:-2], *action_mask.shape[-2:])
        a, w = self.attn(self.norm(h), self.norm(h), mask, return_weights=True)
        out = h + a
        return (out, w) if return_weights else out
