"""Personalized brainprint module: brainmap embedding, subject / attention
heads and the multiplicative refinement of separated audio features."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .separator import _interp


class ResidualConvBlock(nn.Module):
    def __init__(self, width: int, kernel: int):
        super().__init__()
        self.conv1 = nn.Conv1d(width, width, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(width, width, kernel, padding=kernel // 2)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class BrainprintModule(nn.Module):
    """Temporal EEG tokens -> brainmap (B, d_b, T') -> SID / AAD logits.

    The heads average the brainmap over time, standardise each pooled
    feature with batch statistics (running statistics in eval mode) and
    apply an affine map.
    """

    def __init__(self, d_model: int, d_b: int = 32, n_subjects: int = 4, kernel: int = 5, n_blocks: int = 2):
        super().__init__()
        if n_subjects < 2:
            raise ConfigError("need at least two subjects")
        self.in_proj = nn.Conv1d(d_model, d_b, 1)
        self.blocks = nn.Sequential(*[ResidualConvBlock(d_b, kernel) for _ in range(n_blocks)])
        # pooled features carry a large shared offset and a small between-trial spread
        self.pool_norm = nn.BatchNorm1d(d_b, affine=False)
        self.sid_head = nn.Linear(d_b, n_subjects)
        self.aad_head = nn.Linear(d_b, 2)

    def brainmap(self, temporal_tokens: torch.Tensor) -> torch.Tensor:
        return self.blocks(self.in_proj(temporal_tokens.transpose(1, 2)))

    def pooled(self, brainmap: torch.Tensor) -> torch.Tensor:
        z = brainmap.mean(dim=-1)
        n = self.pool_norm
        use_batch = self.training and z.shape[0] > 1
        return F.batch_norm(z, n.running_mean, n.running_var, training=use_batch, momentum=n.momentum,
                            eps=n.eps)

    @torch.no_grad()
    def set_pool_statistics(self, pooled: torch.Tensor) -> None:
        """Replace the running statistics with the exact mean / unbiased
        variance of time-pooled brainmaps ``pooled`` of shape (N, d_b)."""
        self.pool_norm.running_mean.copy_(pooled.mean(0))
        self.pool_norm.running_var.copy_(pooled.var(0, unbiased=pooled.shape[0] > 1))

    def heads(self, brainmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """SID and AAD logits from a single pooling pass."""
        z = self.pooled(brainmap)
        return self.sid_head(z), self.aad_head(z)

    def classify_sid(self, brainmap: torch.Tensor) -> torch.Tensor:
        return self.sid_head(self.pooled(brainmap))

    def classify_aad(self, brainmap: torch.Tensor) -> torch.Tensor:
        return self.aad_head(self.pooled(brainmap))


class BrainprintModulation(nn.Module):
    """``(T(E) + P(brainmap)) * A`` with both projections linearly stretched to
    the separator's frame count."""

    def __init__(self, d_model: int, d_b: int, width: int):
        super().__init__()
        self.embed_proj = nn.Linear(d_model, width)
        self.brainmap_proj = nn.Conv1d(d_b, width, 1)

    def gain(self, temporal_tokens: torch.Tensor, brainmap: torch.Tensor, n_frames: int) -> torch.Tensor:
        t = _interp(self.embed_proj(temporal_tokens).transpose(1, 2), n_frames)
        p = _interp(self.brainmap_proj(brainmap), n_frames)
        return t + p

    def forward(self, a: torch.Tensor, temporal_tokens: torch.Tensor, brainmap: torch.Tensor) -> torch.Tensor:
        g = self.gain(temporal_tokens, brainmap, a.shape[-1])
        if g.shape != a.shape:
            raise ShapeError(f"gain field {tuple(g.shape)} does not match features {tuple(a.shape)}")
        return g * a
