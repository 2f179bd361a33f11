"""The full conditional inference network: encoders, interaction stack and multimodal decoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .decoder import ModelOutput, TrajectoryDecoder
from .features import FutureEncoder, HistoryEncoder, InputTensors, SceneEncoder, collate
from .interaction import InteractionEncoder, build_interaction_masks


@dataclass
class Embeddings:
    agent_emb: torch.Tensor         # [..., 11, D]
    lane_emb: torch.Tensor          # [..., 11, L, D]
    crosswalk_emb: torch.Tensor     # [..., 11, C, D]
    vut_future_emb: torch.Tensor | None  # [..., 50, D]; None when the plan path is ablated


class TrafficModel(nn.Module):
    """Infers K futures for the 10 background agents given their histories, the map and the VUT plan.

    Input is a batch dict as produced by :func:`features.collate`; outputs
    cover slots 1-10 (the VUT slot only serves as context).
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.use_future = not cfg.no_augment
        self.scene_encoder = SceneEncoder(d)
        self.history_encoder = HistoryEncoder(d)
        if self.use_future:
            self.future_encoder = FutureEncoder(d, cfg.n_heads)
        self.interaction = InteractionEncoder(d, cfg.n_heads, cfg.n_layers, self.use_future)
        self.decoder = TrajectoryDecoder(d, cfg.n_modes, cfg.v_max)

    def embed(self, batch) -> Embeddings:
        agent = self.history_encoder(batch["agent_history"], batch["agent_mask"])
        lane, cw = self.scene_encoder(batch["lanes"], batch["lane_mask"], batch["crosswalks"], batch["crosswalk_mask"])
        fut = self.future_encoder(batch["vut_future"]) if self.use_future else None
        return Embeddings(agent, lane, cw, fut)

    def forward(self, batch, return_embeddings: bool = False):
        mask = batch["agent_mask"]
        emb = self.embed(batch)
        masks = build_interaction_masks(mask, batch["lane_mask"], batch["crosswalk_mask"],
                                        batch["vut_future"].shape[-2])
        scene = torch.cat([emb.lane_emb, emb.crosswalk_emb], dim=-2)
        fused = self.interaction(emb.agent_emb, scene, emb.vut_future_emb, masks, mask)
        hist = batch["agent_history"]
        start = torch.where(mask[..., None], hist[..., -1, :2], torch.zeros_like(hist[..., -1, :2]))
        out = self.decoder(fused[..., 1:, :], emb.agent_emb[..., 1:, :], start[..., 1:, :], mask[..., 1:])
        return (out, emb) if return_embeddings else out

    def infer(self, inputs: InputTensors) -> ModelOutput:
        """Single-frame inference without gradients; returns unbatched float64 tensors."""
        dtype = next(self.parameters()).dtype
        with torch.no_grad():
            out = self(collate([inputs], dtype=dtype))
        return ModelOutput(out.trajectories[0].double(), out.scores[0].double(), out.agent_mask[0],
                           out.logits[0].double())


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32) -> TrafficModel:
    """Deterministically initialized model."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = TrafficModel(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
