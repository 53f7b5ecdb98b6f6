"""Multi-head self-attention with a post-norm residual, shared by the EEG
fusion layer and the separator blocks."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ConfigError


class SelfAttention(nn.Module):
    """``LayerNorm(x + MHA(x))`` over inputs of shape (batch, tokens, width)."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads != 0:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width, bias=False)  # a key bias cancels in the softmax
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.norm = nn.LayerNorm(width)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax attention of shape (batch, heads, tokens, tokens)."""
        q, k = self._split(self.q(x)), self._split(self.k(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.width // self.heads)
        return torch.softmax(scores, dim=-1)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, _ = t.shape
        return t.view(b, n, self.heads, self.width // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        weights = self.attention_weights(x)
        ctx = weights @ self._split(self.v(x))
        ctx = ctx.transpose(1, 2).reshape(x.shape)
        y = self.norm(x + self.out(ctx))
        return (y, weights) if return_weights else y
