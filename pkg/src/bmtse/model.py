"""End-to-end model: EEG encoder -> fused separator -> brainprint refinement
-> masked rebuild, plus ablation wiring and parameter initialisation."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .brainprint import BrainprintModulation, BrainprintModule
from .eeg_encoder import EEGEncoder, EncoderConfig
from .errors import ConfigError
from .separator import AudioEEGFusion, AudioEncoder, Rebuilder, Separator, SeparatorConfig, init_passthrough


@dataclass
class AblationFlags:
    no_ls_tconv: bool = False
    no_sconv: bool = False
    no_asg: bool = False
    no_sid_loss: bool = False

    def __post_init__(self):
        if self.no_ls_tconv and self.no_sconv:
            raise ConfigError("no_ls_tconv and no_sconv cannot both be set")


ABLATION_VARIANTS = {
    "Full": AblationFlags(),
    "w/o LS-TConv": AblationFlags(no_ls_tconv=True),
    "w/o SConv": AblationFlags(no_sconv=True),
    "w/o ASG": AblationFlags(no_asg=True),
    "w/o L_SID": AblationFlags(no_sid_loss=True),
}


@dataclass
class ModelConfig:
    sample_rate: int = 8000
    n_samples: int = 16000
    eeg: EncoderConfig = field(default_factory=EncoderConfig)
    sep: SeparatorConfig = field(default_factory=SeparatorConfig)
    d_b: int = 32
    brainprint_kernel: int = 5
    n_subjects: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["eeg"] = EncoderConfig(**d["eeg"])
        d["sep"] = SeparatorConfig(**d["sep"])
        return cls(**d)

    @classmethod
    def tiny(cls, n_subjects: int = 3) -> "ModelConfig":
        """Small configuration for gradient checks."""
        return cls(
            sample_rate=8000, n_samples=512,
            eeg=EncoderConfig(channels=4, samples=32, temporal_dim=8, temporal_stride=4, spatial_dim=8,
                              d_model=8, heads=2, k_short=3, k_long=7, k_spatial=3, gn_groups=2,
                              pool_window=3),
            sep=SeparatorConfig(n_filters=8, frame_len=16, frame_stride=8, fusion_width=4, width=8,
                                segment_len=16, heads=2, hidden=8, passthrough_init=False),
            d_b=4, brainprint_kernel=3, n_subjects=n_subjects,
        )


def apply_ablation(cfg: ModelConfig, flags: AblationFlags) -> ModelConfig:
    """Model configuration with the ablated encoder components switched off.

    ``no_sid_loss`` does not touch the model; it zeroes alpha in training.
    """
    cfg = copy.deepcopy(cfg)
    cfg.eeg.use_temporal = not flags.no_ls_tconv
    cfg.eeg.use_spatial = not flags.no_sconv
    cfg.eeg.use_asg = not flags.no_asg
    cfg.eeg.__post_init__()
    return cfg


class BMTSE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.eeg_encoder = EEGEncoder(cfg.eeg)
        self.audio_encoder = AudioEncoder(cfg.sep)
        self.fusion = AudioEEGFusion(cfg.sep, cfg.eeg.d_model)
        self.separator = Separator(cfg.sep)
        self.brainprint = BrainprintModule(cfg.eeg.d_model, cfg.d_b, cfg.n_subjects, cfg.brainprint_kernel)
        self.modulation = BrainprintModulation(cfg.eeg.d_model, cfg.d_b, cfg.sep.width)
        self.rebuilder = Rebuilder(cfg.sep)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Uniform fan-in weights and biases; zero positional embeddings and
        ASG gate shifts; unit embedding-projection bias so the initial gain
        field sits near one; passthrough encoder/decoder when it fits."""
        for m in self.modules():
            if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.ConvTranspose1d, nn.Linear)):
                m.reset_parameters()
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith(("pos_temporal", "pos_spatial", "gate_shift")):
                    p.zero_()
                elif name.endswith("gate_scale"):
                    p.fill_(1.0)
            self.modulation.embed_proj.bias.fill_(1.0)
        sep = self.cfg.sep
        if sep.passthrough_init and sep.n_filters >= 4 * sep.frame_len and sep.frame_len == 2 * sep.frame_stride:
            init_passthrough(self.audio_encoder, self.rebuilder)

    def forward(self, mixture: torch.Tensor, eeg: torch.Tensor, use_skip: bool = True) -> dict:
        e = self.eeg_encoder(eeg)
        enc = self.audio_encoder(mixture)
        fused = self.fusion(enc, e.data)
        a = self.separator(fused, use_skip=use_skip)
        tokens = e.temporal
        brainmap = self.brainprint.brainmap(tokens)
        a_refined = self.modulation(a, tokens, brainmap)
        est = self.rebuilder(a_refined, enc, mixture.shape[-1])
        sid_logits, aad_logits = self.brainprint.heads(brainmap)
        return {
            "est": est,
            "sid_logits": sid_logits,
            "aad_logits": aad_logits,
            "embedding": e,
            "brainmap": brainmap,
        }


    @torch.no_grad()
    def calibrate(self, eeg: torch.Tensor, batch_size: int = 32) -> None:
        """Set the head normalisation statistics from the EEG trials ``eeg``
        (the audio path is not needed)."""
        pooled = []
        for i in range(0, eeg.shape[0], batch_size):
            tokens = self.eeg_encoder(eeg[i: i + batch_size]).temporal
            pooled.append(self.brainprint.brainmap(tokens).mean(dim=-1))
        self.brainprint.set_pool_statistics(torch.cat(pooled))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
