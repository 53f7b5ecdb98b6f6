"""Multi-task objective: waveform MSE + STFT magnitude L1 + negative SI-SDR
for extraction, plus cross-entropy for subject and attention heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, DomainError, ShapeError

SI_SDR_EPS = 1e-8
MAG_EPS = 1e-10
STFT_WIN = 256
STFT_HOP = 128


@dataclass
class LossWeights:
    w1: float = 1.0
    w2: float = 0.5
    w3: float = 1.0
    alpha: float = 0.1
    beta: float = 0.1

    def __post_init__(self):
        vals = asdict(self)
        if any(v < 0 for v in vals.values()):
            raise ConfigError(f"loss weights must be nonnegative: {vals}")
        if self.w1 == self.w2 == self.w3 == 0 and self.alpha == self.beta == 0:
            raise ConfigError("all loss weights are zero")


@dataclass
class LossBreakdown:
    total: float
    mse: float
    stft_mag: float
    si_sdr_loss: float
    sid_ce: float
    aad_ce: float

    @staticmethod
    def recompose(w: LossWeights, mse, stft_mag, si_sdr_loss, sid_ce, aad_ce):
        return w.w1 * mse + w.w2 * stft_mag + w.w3 * si_sdr_loss + w.alpha * sid_ce + w.beta * aad_ce


def si_sdr(est: torch.Tensor, ref: torch.Tensor, eps: float = SI_SDR_EPS) -> torch.Tensor:
    """Per-item SI-SDR in dB over the last axis (no mean removal)."""
    if est.shape != ref.shape:
        raise ShapeError(f"length mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    ref_energy = (ref * ref).sum(-1, keepdim=True)
    if bool((ref_energy == 0).any()):
        raise DomainError("reference signal is identically zero")
    s_target = (est * ref).sum(-1, keepdim=True) / ref_energy * ref
    e = est - s_target
    return 10 * torch.log10(((s_target ** 2).sum(-1) + eps) / ((e ** 2).sum(-1) + eps))


def stft_magnitude(x: torch.Tensor, win_len: int = STFT_WIN, hop: int = STFT_HOP) -> torch.Tensor:
    """Hann-windowed, unpadded STFT magnitude (..., frames, win_len//2 + 1)."""
    if x.shape[-1] < win_len:
        raise ShapeError(f"signal of {x.shape[-1]} samples shorter than window {win_len}")
    n = torch.arange(win_len, dtype=x.dtype, device=x.device)
    window = 0.5 - 0.5 * torch.cos(2 * torch.pi * n / win_len)
    spec = torch.fft.rfft(x.unfold(-1, win_len, hop) * window, dim=-1)
    return torch.sqrt(spec.real ** 2 + spec.imag ** 2 + MAG_EPS)


def tse_loss(est: torch.Tensor, ref: torch.Tensor, w: LossWeights):
    """Returns the weighted extraction loss and its (mse, stft_mag, si_sdr_loss) terms."""
    mse = ((est - ref) ** 2).mean()
    stft_mag = (stft_magnitude(est) - stft_magnitude(ref)).abs().mean()
    si_sdr_loss = -si_sdr(est, ref).mean()
    value = w.w1 * mse + w.w2 * stft_mag + w.w3 * si_sdr_loss
    return value, (mse, stft_mag, si_sdr_loss)


def ce_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy ``-log softmax(logits)[label]`` (log-sum-exp stabilised)."""
    logits = torch.atleast_2d(logits)
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1)
    if labels.numel() != logits.shape[0]:
        raise ShapeError("one label per logit row is required")
    if bool(((labels < 0) | (labels >= logits.shape[-1])).any()):
        raise DomainError(f"label out of range for {logits.shape[-1]} classes")
    return F.cross_entropy(logits, labels)


def total_loss(est, ref, sid_logits, sid_labels, aad_logits, aad_labels, w: LossWeights):
    """Differentiable total loss and its breakdown.

    Components are combined in float64 in the same order as
    :meth:`LossBreakdown.recompose`, so the breakdown sums to ``total`` exactly.
    """
    _, (mse, stft_mag, sisdr) = tse_loss(est, ref, w)
    sid = ce_loss(sid_logits, sid_labels)
    aad = ce_loss(aad_logits, aad_labels)
    parts = [t.double() for t in (mse, stft_mag, sisdr, sid, aad)]
    total = LossBreakdown.recompose(w, *parts)
    vals = [float(p.detach()) for p in parts]
    breakdown = LossBreakdown(float(total.detach()), *vals)
    return total, breakdown
