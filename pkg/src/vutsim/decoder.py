"""Multimodal trajectory head: K cumulative-offset futures per agent plus softmax mode scores."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .scenario import DT, FUTURE_STEPS


@dataclass
class ModelOutput:
    trajectories: torch.Tensor  # [..., 10, K, 50, 2] VUT local frame
    scores: torch.Tensor        # [..., 10, K]
    agent_mask: torch.Tensor    # [..., 10]
    logits: torch.Tensor | None = None

    def detach(self) -> "ModelOutput":
        return ModelOutput(self.trajectories.detach(), self.scores.detach(), self.agent_mask,
                           None if self.logits is None else self.logits.detach())


def max_step_offset(v_max: float) -> float:
    """Per-coordinate bound on a single-step displacement so the step speed stays under v_max."""
    return v_max * DT / math.sqrt(2.0)


def bounded_offsets(raw: torch.Tensor, bound: float) -> torch.Tensor:
    return bound * torch.tanh(raw / bound)


def decode_positions(start_xy: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """start_xy [..., 2], offsets [..., K, T, 2] -> positions start + cumulative sum of offsets."""
    return start_xy.unsqueeze(-2).unsqueeze(-2) + torch.cumsum(offsets, dim=-2)


class TrajectoryDecoder(nn.Module):
    """Shared MLP over [fused, history embedding] emitting K x 50 x 2 offsets and K logits per agent."""

    def __init__(self, d_model: int, n_modes: int = 3, v_max: float = 40.0, n_steps: int = FUTURE_STEPS):
        super().__init__()
        self.n_modes = n_modes
        self.n_steps = n_steps
        self.bound = max_step_offset(v_max)
        hidden = 2 * d_model
        self.trunk = nn.Sequential(nn.Linear(2 * d_model, hidden), nn.Tanh())
        self.traj_head = nn.Linear(hidden, n_modes * n_steps * 2)
        self.score_head = nn.Linear(hidden, n_modes)

    def forward(self, fused, agent_emb, start_xy, agent_mask) -> ModelOutput:
        """fused/agent_emb [..., 10, D], start_xy [..., 10, 2], agent_mask [..., 10]."""
        h = self.trunk(torch.cat([fused, agent_emb], dim=-1))
        raw = self.traj_head(h).reshape(*h.shape[:-1], self.n_modes, self.n_steps, 2)
        keep = agent_mask.to(h.dtype)
        offsets = bounded_offsets(raw, self.bound)
        traj = decode_positions(start_xy, offsets) * keep[..., None, None, None]
        logits = self.score_head(h)
        logits = torch.where(agent_mask.unsqueeze(-1), logits, torch.zeros_like(logits))
        return ModelOutput(traj, torch.softmax(logits, dim=-1), agent_mask, logits)


def select_most_likely(output: ModelOutput) -> torch.Tensor:
    """Per-agent highest-score mode, first index on ties -> [..., 10, 50, 2]."""
    idx = torch.argmax(output.scores, dim=-1)  # torch.argmax returns the first maximal index
    idx = idx[..., None, None, None].expand(*idx.shape, 1, *output.trajectories.shape[-2:])
    return torch.gather(output.trajectories, -3, idx).squeeze(-3)
