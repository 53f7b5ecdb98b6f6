"""Robust spatio-temporal EEG encoder.

Two parallel branches (long/short temporal convolution and per-electrode
spatial convolution) are enhanced by Adaptive Spectral Gain, tagged with
learnable positional embeddings and fused by one self-attention layer into a
token sequence ``(B, T' + C, d_model)``: temporal tokens first, then one
token per electrode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import SelfAttention
from .errors import ConfigError


@dataclass
class EncoderConfig:
    channels: int = 16
    samples: int = 256
    temporal_dim: int = 32
    temporal_stride: int = 4
    spatial_dim: int = 16
    d_model: int = 64
    heads: int = 4
    k_short: int = 15
    k_long: int = 65
    k_spatial: int = 9
    gn_groups: int = 4
    pool_window: int = 9
    eps: float = 1e-6
    use_temporal: bool = True
    use_spatial: bool = True
    use_asg: bool = True

    def __post_init__(self):
        if not (self.use_temporal or self.use_spatial):
            raise ConfigError("encoder needs at least one of the temporal/spatial branches")
        if self.samples % self.temporal_stride:
            raise ConfigError(f"temporal_stride {self.temporal_stride} does not divide T={self.samples}")
        if self.temporal_dim % 2:
            raise ConfigError("temporal_dim must be even (short + long halves)")
        if self.spatial_dim > self.samples:
            raise ConfigError(f"spatial_dim {self.spatial_dim} exceeds T={self.samples}")
        for k in (self.k_short, self.k_long, self.k_spatial):
            if k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd, got {k}")
        if self.pool_window % 2 == 0 or self.eps <= 0:
            raise ConfigError("pool_window must be odd and eps positive")
        if self.use_asg and (self.temporal_dim % self.gn_groups or self.spatial_dim % self.gn_groups):
            raise ConfigError(f"gn_groups {self.gn_groups} must divide both feature widths")

    @property
    def temporal_tokens(self) -> int:
        return self.samples // self.temporal_stride if self.use_temporal else 0

    @property
    def spatial_tokens(self) -> int:
        return self.channels if self.use_spatial else 0

    @property
    def n_tokens(self) -> int:
        return self.temporal_tokens + self.spatial_tokens


class FusedEmbedding(NamedTuple):
    data: torch.Tensor  # (B, T' + C, d_model)
    temporal_token_count: int

    @property
    def temporal(self) -> torch.Tensor:
        """Temporal tokens; all tokens when the temporal branch is disabled."""
        if self.temporal_token_count == 0:
            return self.data
        return self.data[:, : self.temporal_token_count]


def standardize_eeg(x: np.ndarray) -> np.ndarray:
    """Per-trial, per-channel z-scoring over the time axis."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / np.where(sd > 0, sd, 1.0)


class LSTConv(nn.Module):
    """Short and long temporal kernels applied identically to every electrode,
    rectified, averaged over electrodes and pooled by ``stride``."""

    def __init__(self, dim: int, k_short: int, k_long: int, stride: int):
        super().__init__()
        self.short = nn.Conv2d(1, dim // 2, (1, k_short), padding=(0, k_short // 2))
        self.long = nn.Conv2d(1, dim // 2, (1, k_long), padding=(0, k_long // 2))
        self.stride = stride

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.stride:
            raise ConfigError(f"stride {self.stride} does not divide T={x.shape[-1]}")
        h = x.unsqueeze(1)
        h = F.gelu(torch.cat([self.short(h), self.long(h)], dim=1))  # B, D, C, T
        return F.avg_pool1d(h.mean(dim=2), self.stride)


class SConv(nn.Module):
    """One temporal kernel shared by all electrodes, then adaptive pooling of
    time down to ``dim`` features; output row c belongs to electrode c."""

    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.conv = nn.Conv1d(1, 1, kernel, padding=kernel // 2)
        self.dim = dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, t = x.shape
        if self.dim > t:
            raise ConfigError(f"spatial_dim {self.dim} exceeds T={t}")
        h = F.gelu(self.conv(x.reshape(b * c, 1, t)))
        return F.adaptive_avg_pool1d(h, self.dim).reshape(b, c, self.dim)


class AdaptiveSpectralGain(nn.Module):
    """Concat of a GroupNorm-gated copy and a log-power map of the input.

    Input layout is (B, features, positions). The log-power average pool is
    stride-1 and same-padded along the feature axis when ``pool_features`` is
    set, otherwise along the position axis, so both halves share a shape.
    """

    def __init__(self, n_features: int, gn_groups: int, pool_window: int, eps: float,
                 pool_features: bool = False):
        super().__init__()
        if n_features % gn_groups:
            raise ConfigError(f"{gn_groups} groups do not divide {n_features} features")
        if pool_window % 2 == 0:
            raise ConfigError("pool_window must be odd")
        self.gn = nn.GroupNorm(gn_groups, n_features, affine=False, eps=1e-5)
        self.gate_scale = nn.Parameter(torch.ones(n_features))
        self.gate_shift = nn.Parameter(torch.zeros(n_features))
        self.pool_window = pool_window
        self.eps = eps
        self.pool_features = pool_features

    def gate(self, e: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.gate_scale[:, None] * self.gn(e) + self.gate_shift[:, None])

    def log_power(self, e: torch.Tensor) -> torch.Tensor:
        p = e * e + self.eps
        if self.pool_features:
            p = p.transpose(1, 2)
        p = F.avg_pool1d(p, self.pool_window, stride=1, padding=self.pool_window // 2,
                         count_include_pad=False)
        if self.pool_features:
            p = p.transpose(1, 2)
        return torch.log(p)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return torch.cat([e * self.gate(e), self.log_power(e)], dim=1)


class CrossDomainFusion(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        widen = 2 if cfg.use_asg else 1
        self.n_temporal = cfg.temporal_tokens
        self.n_spatial = cfg.spatial_tokens
        if cfg.use_temporal:
            self.proj_temporal = nn.Linear(widen * cfg.temporal_dim, cfg.d_model)
            self.pos_temporal = nn.Parameter(torch.zeros(self.n_temporal, cfg.d_model))
        if cfg.use_spatial:
            self.proj_spatial = nn.Linear(widen * cfg.spatial_dim, cfg.d_model)
            self.pos_spatial = nn.Parameter(torch.zeros(self.n_spatial, cfg.d_model))
        self.attn = SelfAttention(cfg.d_model, cfg.heads)

    def tokens(self, temporal: torch.Tensor | None, spatial: torch.Tensor | None) -> torch.Tensor:
        """Projected, position-tagged token sequence before attention.

        ``temporal`` is (B, features, T'); ``spatial`` is (B, C, features).
        """
        parts = []
        if temporal is not None:
            if temporal.shape[-1] != self.n_temporal:
                raise ConfigError(f"expected {self.n_temporal} temporal tokens, got {temporal.shape[-1]}")
            parts.append(self.proj_temporal(temporal.transpose(1, 2)) + self.pos_temporal)
        if spatial is not None:
            if spatial.shape[1] != self.n_spatial:
                raise ConfigError(f"expected {self.n_spatial} spatial tokens, got {spatial.shape[1]}")
            parts.append(self.proj_spatial(spatial) + self.pos_spatial)
        return torch.cat(parts, dim=1)

    def forward(self, temporal, spatial, return_weights: bool = False):
        return self.attn(self.tokens(temporal, spatial), return_weights=return_weights)


class EEGEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.use_temporal:
            self.ls_tconv = LSTConv(cfg.temporal_dim, cfg.k_short, cfg.k_long, cfg.temporal_stride)
        if cfg.use_spatial:
            self.sconv = SConv(cfg.spatial_dim, cfg.k_spatial)
        if cfg.use_asg:
            if cfg.use_temporal:
                self.asg_temporal = AdaptiveSpectralGain(cfg.temporal_dim, cfg.gn_groups, cfg.pool_window, cfg.eps)
            if cfg.use_spatial:
                self.asg_spatial = AdaptiveSpectralGain(cfg.spatial_dim, cfg.gn_groups, cfg.pool_window, cfg.eps,
                                                        pool_features=True)
        self.fusion = CrossDomainFusion(cfg)

    def branches(self, x: torch.Tensor):
        """ASG-enhanced branch outputs: (B, 2D, T') and (B, C, 2D'); None when disabled."""
        cfg = self.cfg
        temporal = spatial = None
        if cfg.use_temporal:
            temporal = self.ls_tconv(x)
            if cfg.use_asg:
                temporal = self.asg_temporal(temporal)
        if cfg.use_spatial:
            spatial = self.sconv(x)
            if cfg.use_asg:
                spatial = self.asg_spatial(spatial.transpose(1, 2)).transpose(1, 2)
        return temporal, spatial

    def forward(self, x: torch.Tensor) -> FusedEmbedding:
        if x.shape[1] != self.cfg.channels or x.shape[2] != self.cfg.samples:
            raise ConfigError(
                f"EEG batch {tuple(x.shape)} does not match C={self.cfg.channels}, T={self.cfg.samples}")
        temporal, spatial = self.branches(x)
        return FusedEmbedding(self.fusion(temporal, spatial), self.cfg.temporal_tokens)
