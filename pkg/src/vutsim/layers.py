"""Small neural building blocks shared by the encoders and the interaction stack."""
from __future__ import annotations

import math

import torch
from torch import nn

MASKED_LOGIT = -1e9


class MLP(nn.Module):
    """Two affine layers with a tanh in between (smooth, so finite differences behave)."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x):
        return self.fc2(torch.tanh(self.fc1(x)))


def masked_max(h: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    """Max over ``dim`` of ``h`` [..., D] restricted to ``mask`` (same shape minus D); all-masked groups give zeros."""
    mask_dim = dim + 1 if dim < 0 else dim
    fill = torch.finfo(h.dtype).min
    pooled = torch.where(mask.unsqueeze(-1), h, torch.full_like(h, fill)).amax(dim=dim)
    return torch.where(mask.any(dim=mask_dim).unsqueeze(-1), pooled, torch.zeros_like(pooled))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over arbitrary leading batch dimensions.

    ``mask[..., i, j]`` allows query i to attend key j. Disallowed logits are
    set to -1e9 before the softmax; a query with no allowed key returns a zero
    vector.
    """

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def _split(self, x):
        return x.reshape(*x.shape[:-1], self.n_heads, self.d_head).transpose(-2, -3)

    def forward(self, query, key, mask, return_weights: bool = False):
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(key))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        m = mask.unsqueeze(-3)
        logits = torch.where(m, logits, torch.full_like(logits, MASKED_LOGIT))
        weights = torch.softmax(logits, dim=-1)
        any_allowed = mask.any(-1)
        weights = weights * any_allowed.unsqueeze(-2).unsqueeze(-1).to(weights.dtype)
        ctx = (weights @ v).transpose(-2, -3)
        ctx = ctx.reshape(*ctx.shape[:-2], self.n_heads * self.d_head)
        out = self.o(ctx) * any_allowed.unsqueeze(-1).to(ctx.dtype)
        if return_weights:
            return out, weights
        return out
