"""Audio path: learned waveform encoder, EEG-audio fusion, two sandglass
separation blocks and the masking rebuilder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.fft import dct

from .attention import SelfAttention
from .errors import ConfigError, LengthError, ShapeError


@dataclass
class SeparatorConfig:
    n_filters: int = 64
    frame_len: int = 16
    frame_stride: int = 8
    fusion_width: int = 32
    width: int = 64
    segment_len: int = 64
    granularity: list = field(default_factory=lambda: [1, 2])
    heads: int = 4
    hidden: int = 128
    passthrough_init: bool = True

    def __post_init__(self):
        if len(self.granularity) != 2:
            raise ConfigError("exactly two sandglass blocks are supported")
        for g in self.granularity:
            if g < 1 or g & (g - 1):
                raise ConfigError(f"granularity factors must be powers of two, got {g}")
        if self.segment_len < 2 or self.segment_len % 2:
            raise ConfigError("segment_len must be even and >= 2")

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.frame_len) // self.frame_stride + 1


def _interp(x: torch.Tensor, length: int) -> torch.Tensor:
    """Linear interpolation of (B, F, n) to (B, F, length) with matched endpoints."""
    if x.shape[-1] == 1:
        return x.expand(-1, -1, length)
    return F.interpolate(x, size=length, mode="linear", align_corners=True)


def passthrough_basis(n_filters: int, frame_len: int, frame_stride: int) -> np.ndarray:
    """Sign-split tight-frame filters: analysing and synthesising with them
    reproduces the input exactly wherever the sqrt-Hann windows overlap-add
    to one. Needs ``n_filters >= 4 * frame_len`` and ``frame_stride = frame_len / 2``."""
    half = n_filters // 2
    if half < 2 * frame_len or frame_len != 2 * frame_stride:
        raise ConfigError("passthrough basis needs n_filters >= 4*frame_len and 50% overlap")
    eye = np.eye(frame_len)
    basis = np.concatenate([dct(eye, type=2, norm="ortho", axis=0), dct(eye, type=4, norm="ortho", axis=0)])
    basis /= np.sqrt(2.0)
    extra = half - 2 * frame_len
    if extra:
        basis = np.concatenate([basis, np.zeros((extra, frame_len))])
    n = np.arange(frame_len)
    sqrt_win = np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * n / frame_len))
    basis = basis * sqrt_win
    return np.concatenate([basis, -basis])


class AudioEncoder(nn.Module):
    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv1d(1, cfg.n_filters, cfg.frame_len, stride=cfg.frame_stride, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] < self.cfg.frame_len:
            raise LengthError(f"{x.shape[-1]} samples shorter than one frame ({self.cfg.frame_len})")
        return F.relu(self.conv(x.unsqueeze(1)))


class AudioEEGFusion(nn.Module):
    """Project EEG tokens, stretch them over the audio frames and mix with the
    audio features through a pointwise convolution."""

    def __init__(self, cfg: SeparatorConfig, d_model: int):
        super().__init__()
        self.eeg_proj = nn.Linear(d_model, cfg.fusion_width)
        self.mix = nn.Conv1d(cfg.n_filters + cfg.fusion_width, cfg.width, 1)

    def aligned_eeg(self, tokens: torch.Tensor, n_frames: int) -> torch.Tensor:
        return _interp(self.eeg_proj(tokens).transpose(1, 2), n_frames)

    def forward(self, audio: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        eeg = self.aligned_eeg(tokens, audio.shape[-1])
        return self.mix(torch.cat([audio, eeg], dim=1))


def segment(f: torch.Tensor, seg_len: int, multiple: int = 1):
    """Split (B, N, L) into 50%-overlapping segments (B, N, seg_len, S) with S a
    multiple of ``multiple``. Returns the segments and the padded length."""
    b, n, length = f.shape
    if seg_len > length:
        raise ConfigError(f"segment_len {seg_len} exceeds {length} frames")
    hop = seg_len // 2
    n_seg = -(-(length + 2 * hop - seg_len) // hop) + 1
    n_seg = -(-n_seg // multiple) * multiple
    padded = (n_seg - 1) * hop + seg_len
    fp = F.pad(f, (hop, padded - length - hop))
    return fp.unfold(2, seg_len, hop).transpose(2, 3), padded


def overlap_add(seg: torch.Tensor, length: int, padded: int) -> torch.Tensor:
    b, n, k, s = seg.shape
    hop = k // 2
    out = F.fold(seg.reshape(b, n * k, s), output_size=(1, padded), kernel_size=(1, k), stride=(1, hop))
    return out.reshape(b, n, padded)[..., hop: hop + length]


def _pool_segments(x: torch.Tensor, factor: int) -> torch.Tensor:
    # x: (B, K, S, N) with S divisible by factor
    if factor == 1:
        return x
    b, k, s, n = x.shape
    return x.reshape(b, k, s // factor, factor, n).mean(dim=3)


class SandglassetBlock(nn.Module):
    """Segment-local feedforward, cross-segment self-attention at a coarsened
    granularity, overlap-add and a residual connection.

    ``forward`` returns the updated features and the block's full-resolution
    attention output, which the mirrored block adds before its attention.
    """

    def __init__(self, width: int, segment_len: int, factor: int, heads: int, hidden: int,
                 seg_multiple: int | None = None):
        super().__init__()
        self.segment_len = segment_len
        self.factor = factor
        self.seg_multiple = seg_multiple or factor
        if self.seg_multiple % factor:
            raise ConfigError("segment multiple must be divisible by the block's factor")
        self.ff = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))
        self.attn = SelfAttention(width, heads)

    def forward(self, f: torch.Tensor, skip: torch.Tensor | None = None, return_weights: bool = False):
        b, n, length = f.shape
        seg, padded = segment(f, self.segment_len, self.seg_multiple)
        h = self.ff(seg.permute(0, 2, 3, 1))  # B, K, S, N
        k, s = h.shape[1], h.shape[2]
        down = _pool_segments(h, self.factor)
        if skip is not None:
            if skip.shape != h.shape:
                raise ShapeError(f"skip state {tuple(skip.shape)} does not match {tuple(h.shape)}")
            down = down + _pool_segments(skip, self.factor)
        s_coarse = down.shape[2]
        z, w = self.attn(down.reshape(b * k, s_coarse, n), return_weights=True)
        z = z.reshape(b, k, s_coarse, n).repeat_interleave(self.factor, dim=2)[:, :, :s]
        out = f + overlap_add(z.permute(0, 3, 1, 2), length, padded)
        return (out, z, w) if return_weights else (out, z)


class Separator(nn.Module):
    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        multiple = max(cfg.granularity)
        self.blocks = nn.ModuleList(
            SandglassetBlock(cfg.width, cfg.segment_len, g, cfg.heads, cfg.hidden, multiple)
            for g in cfg.granularity
        )

    def forward(self, f: torch.Tensor, use_skip: bool = True) -> torch.Tensor:
        f, state = self.blocks[0](f)
        f, _ = self.blocks[1](f, skip=state if use_skip else None)
        return f


class Rebuilder(nn.Module):
    """Sigmoid mask over encoder features followed by a transposed-convolution
    decoder with the encoder's framing."""

    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        self.cfg = cfg
        self.mask_conv = nn.Conv1d(cfg.width, cfg.n_filters, 1)
        self.decoder = nn.ConvTranspose1d(cfg.n_filters, 1, cfg.frame_len, stride=cfg.frame_stride, bias=False)

    def mask(self, a_refined: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mask_conv(a_refined))

    def forward(self, a_refined: torch.Tensor, enc: torch.Tensor, out_len: int) -> torch.Tensor:
        if a_refined.shape[-1] != enc.shape[-1]:
            raise ShapeError(f"feature lengths differ: {a_refined.shape[-1]} vs {enc.shape[-1]}")
        y = self.decoder(self.mask(a_refined) * enc).squeeze(1)
        natural = y.shape[-1]
        if abs(out_len - natural) > self.cfg.frame_stride:
            raise ShapeError(f"out_len {out_len} differs from decoded length {natural} by more than one stride")
        if out_len <= natural:
            return y[..., :out_len]
        return F.pad(y, (0, out_len - natural))


def init_passthrough(encoder: AudioEncoder, rebuilder: Rebuilder) -> None:
    """Encoder/decoder as an exact analysis-synthesis pair and a constant 0.5
    mask, so an untrained model returns half the mixture."""
    cfg = encoder.cfg
    basis = torch.tensor(passthrough_basis(cfg.n_filters, cfg.frame_len, cfg.frame_stride),
                         dtype=encoder.conv.weight.dtype)
    with torch.no_grad():
        encoder.conv.weight.copy_(basis.unsqueeze(1))
        rebuilder.decoder.weight.copy_(basis.unsqueeze(1))
        rebuilder.mask_conv.weight.zero_()
        rebuilder.mask_conv.bias.zero_()
