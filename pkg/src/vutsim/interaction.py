"""Interaction graphs and the two-layer attention encoder that fuses agent, scene and VUT-plan context."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .features import causal_mask
from .layers import MultiHeadAttention
from .scenario import FUTURE_STEPS


@dataclass
class InteractionMasks:
    agent_agent: torch.Tensor    # [..., 11, 11]
    agent_scene: torch.Tensor    # [..., 11, L + C]
    action_action: torch.Tensor  # [50, 50]
    agent_action: torch.Tensor   # [..., 11, 50]


def build_interaction_masks(agent_mask, lane_mask, crosswalk_mask, n_future: int = FUTURE_STEPS) -> InteractionMasks:
    """Graphs from validity masks.

    ``agent_mask`` is [..., 11]; ``lane_mask`` [..., 11, L, W] and
    ``crosswalk_mask`` [..., 11, C, P] are reduced to element validity.
    """
    agent_mask = torch.as_tensor(agent_mask, dtype=torch.bool)
    aa = agent_mask.unsqueeze(-1) & agent_mask.unsqueeze(-2)
    elems = torch.cat([torch.as_tensor(lane_mask).any(-1), torch.as_tensor(crosswalk_mask).any(-1)], dim=-1)
    scene = elems & agent_mask.unsqueeze(-1)
    action = agent_mask.unsqueeze(-1).expand(*agent_mask.shape, n_future)
    return InteractionMasks(aa, scene, causal_mask(n_future), action)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_model)

    def forward(self, x):
        return self.fc2(torch.tanh(self.fc1(x)))


class InteractionLayer(nn.Module):
    """Pre-norm block: agent-agent, agent-scene, agent-to-VUT-plan attention, then a feed-forward map."""

    def __init__(self, d_model: int, n_heads: int, use_future: bool = True):
        super().__init__()
        self.use_future = use_future
        self.norm_aa = nn.LayerNorm(d_model)
        self.norm_as = nn.LayerNorm(d_model)
        self.norm_ff = nn.LayerNorm(d_model)
        self.agent_agent = MultiHeadAttention(d_model, n_heads)
        self.agent_scene = MultiHeadAttention(d_model, n_heads)
        self.feed_forward = FeedForward(d_model, 2 * d_model)
        if use_future:
            self.norm_af = nn.LayerNorm(d_model)
            self.agent_action = MultiHeadAttention(d_model, n_heads)

    def forward(self, x, scene, future, masks: InteractionMasks, agent_mask):
        keep = agent_mask.unsqueeze(-1).to(x.dtype)
        h = self.norm_aa(x)
        x = x + self.agent_agent(h, h, masks.agent_agent)
        # each agent attends only to its own local map elements
        h = self.norm_as(x).unsqueeze(-2)
        x = x + self.agent_scene(h, scene, masks.agent_scene.unsqueeze(-2)).squeeze(-2)
        if self.use_future:
            x = x + self.agent_action(self.norm_af(x), future, masks.agent_action)
        x = x + self.feed_forward(self.norm_ff(x))
        return x * keep


class InteractionEncoder(nn.Module):
    def __init__(self, d_model: int, n_heads: int, n_layers: int = 2, use_future: bool = True):
        super().__init__()
        self.use_future = use_future
        self.layers = nn.ModuleList(InteractionLayer(d_model, n_heads, use_future) for _ in range(n_layers))

    def forward(self, agent_emb, scene_emb, future_emb, masks: InteractionMasks, agent_mask):
        """agent_emb [..., 11, D], scene_emb [..., 11, L + C, D], future_emb [..., 50, D] -> [..., 11, D]."""
        x = agent_emb * agent_mask.unsqueeze(-1).to(agent_emb.dtype)
        for layer in self.layers:
            x = layer(x, scene_emb, future_emb, masks, agent_mask)
        return x
