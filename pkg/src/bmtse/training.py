"""Training protocol, evaluation, checkpoint persistence and finite-difference
gradient verification."""

from __future__ import annotations

import base64
import copy
import csv
import io
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .errors import ConfigError, FormatError, NonFiniteLossError
from .losses import LossBreakdown, LossWeights, total_loss
from .model import BMTSE, AblationFlags, ModelConfig, apply_ablation

log = logging.getLogger(__name__)

PROBE_TARGET_SPREAD = 2.0
CHECKPOINT_MAGIC = b"BMTSE1\0"
LOG_COLUMNS = ("step", "epoch", "lr", "total", "mse", "stft", "sisdr", "sid", "aad")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.9
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval_batch_size: int = 8
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** epoch

    def effective_weights(self) -> LossWeights:
        if self.ablation.no_sid_loss:
            return replace(self.weights, alpha=0.0)
        return self.weights

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["ablation"] = AblationFlags(**d["ablation"])
        d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    metadata: dict

    @classmethod
    def from_model(cls, model: BMTSE, **metadata) -> "Checkpoint":
        params = OrderedDict((k, v.detach().cpu().numpy().astype(np.float64))
                             for k, v in model.state_dict().items())
        metadata.setdefault("model", model.cfg.to_dict())
        return cls(params, metadata)

    def build_model(self, dtype=torch.float32) -> BMTSE:
        model = BMTSE(ModelConfig.from_dict(self.metadata["model"]))
        state = model.state_dict()
        if set(state) != set(self.params):
            missing = set(state) ^ set(self.params)
            raise FormatError(f"checkpoint parameters do not match the model: {sorted(missing)[:5]}")
        for k, v in self.params.items():
            if tuple(state[k].shape) != v.shape:
                raise FormatError(f"{k}: shape {v.shape} != {tuple(state[k].shape)}")
        model.load_state_dict({k: torch.from_numpy(v) for k, v in self.params.items()})
        return model.to(dtype).eval()

    def save(self, path) -> None:
        """``BMTSE1\\0`` magic, uint64 LE header length, JSON header, then the
        parameters as little-endian float64 in header order."""
        index, payload, offset = [], [], 0
        for name, arr in self.params.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            payload.append(raw)
            offset += len(raw)
        header = json.dumps({"metadata": self.metadata, "params": index}, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for raw in payload:
                fh.write(raw)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = Path(path).read_bytes()
        n = len(CHECKPOINT_MAGIC)
        if data[:n] != CHECKPOINT_MAGIC or len(data) < n + 8:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", data[n: n + 8])
        start = n + 8 + hlen
        try:
            header = json.loads(data[n + 8: start])
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt header") from exc
        params = OrderedDict()
        for entry in header["params"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            lo = start + entry["offset"]
            hi = lo + 8 * count
            if hi > len(data):
                raise FormatError(f"{path}: truncated payload at {entry['name']}")
            params[entry["name"]] = np.frombuffer(data[lo:hi], dtype="<f8").reshape(entry["shape"]).copy()
        return cls(params, header["metadata"])


@dataclass
class TrainingLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            w.writerows(self.steps)

    def write_epochs_csv(self, path) -> None:
        if not self.epochs:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.epochs[0]))
            w.writeheader()
            w.writerows(self.epochs)

    def epoch_mean_losses(self) -> list[float]:
        by_epoch: dict[int, list] = {}
        for row in self.steps:
            by_epoch.setdefault(row["epoch"], []).append(row["total"])
        return [float(np.mean(by_epoch[k])) for k in sorted(by_epoch)]


def collate(examples, dtype=torch.float32):
    mix = torch.tensor(np.stack([e.mixture.samples for e in examples]), dtype=dtype)
    tgt = torch.tensor(np.stack([e.target.samples for e in examples]), dtype=dtype)
    eeg = torch.tensor(np.concatenate([e.eeg.data for e in examples]), dtype=dtype)
    sid = torch.tensor([e.subject_id for e in examples], dtype=torch.long)
    aad = torch.tensor([e.attended_side for e in examples], dtype=torch.long)
    return mix, tgt, eeg, sid, aad


def _check_finite(breakdown: LossBreakdown, step: int) -> None:
    for name in ("mse", "stft_mag", "si_sdr_loss", "sid_ce", "aad_ce", "total"):
        value = getattr(breakdown, name)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"step {step}: loss component {name!r} is {value}")


@torch.no_grad()
def predict(model: BMTSE, examples, batch_size: int = 8):
    """Estimated waveforms (float64) and SID / AAD class predictions."""
    model.eval()
    dtype = next(model.parameters()).dtype
    ests, sids, aads = [], [], []
    for i in range(0, len(examples), batch_size):
        mix, _, eeg, _, _ = collate(examples[i: i + batch_size], dtype)
        out = model(mix, eeg)
        ests.append(out["est"].double().numpy())
        sids.append(out["sid_logits"].argmax(-1).numpy())
        aads.append(out["aad_logits"].argmax(-1).numpy())
    return np.concatenate(ests), np.concatenate(sids), np.concatenate(aads)


def _mean_si_sdri(est, examples) -> float:
    return float(np.mean([metrics.si_sdri(e, ex.target.samples, ex.mixture.samples)
                          for e, ex in zip(est, examples)]))


def mean_si_sdri(model: BMTSE, examples, batch_size: int = 8) -> float:
    return _mean_si_sdri(predict(model, examples, batch_size)[0], examples)


@dataclass
class EvalReport:
    si_sdr_db: float
    si_sdri_db: float
    stoi: float
    estoi: float
    sid_acc: float
    aad_acc: float

    @property
    def metrics(self) -> metrics.MetricsReport:
        return metrics.MetricsReport(self.si_sdr_db, self.si_sdri_db, self.stoi, self.estoi)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_model(model_or_ckpt, examples, batch_size: int = 8, intelligibility: bool = True) -> EvalReport:
    """Mean SI-SDR, SI-SDRi, STOI, ESTOI and SID / AAD accuracies over ``examples``."""
    model = model_or_ckpt.build_model() if isinstance(model_or_ckpt, Checkpoint) else model_or_ckpt
    if not examples:
        raise ConfigError("no examples to evaluate")
    est, sid, aad = predict(model, examples, batch_size)
    rows = []
    for e, ex in zip(est, examples):
        ref, mix, fs = ex.target.samples, ex.mixture.samples, ex.target.sample_rate_hz
        rows.append((
            metrics.si_sdr(e, ref),
            metrics.si_sdri(e, ref, mix),
            metrics.stoi(e, ref, fs) if intelligibility else float("nan"),
            metrics.estoi(e, ref, fs) if intelligibility else float("nan"),
        ))
    means = np.mean(np.array(rows), axis=0)
    sid_acc = float(np.mean(sid == np.array([ex.subject_id for ex in examples])))
    aad_acc = float(np.mean(aad == np.array([ex.attended_side for ex in examples])))
    return EvalReport(*map(float, means), sid_acc, aad_acc)


def _rng_metadata(rng: np.random.Generator) -> dict:
    return {
        "numpy": rng.bit_generator.state,
        "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii"),
    }


def train(config: TrainConfig, data, progress: bool = False):
    """Adam on the total loss with per-epoch learning-rate decay; keeps the
    parameters with the best mean validation SI-SDRi. After every epoch the
    SID/AAD head normalisation is recalibrated on the training EEG.

    Returns ``(Checkpoint, TrainingLog)``.
    """
    if not data.train or not data.val:
        raise ConfigError("training and validation sets must be nonempty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = BMTSE(apply_ablation(config.model, config.ablation))
    weights = config.effective_weights()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    tlog = TrainingLog()
    best = None
    step = 0
    n = len(data.train)
    train_eeg = collate(data.train)[2]
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = rng.permutation(n)
        for i in range(0, n, config.batch_size):
            batch = [data.train[j] for j in order[i: i + config.batch_size]]
            mix, tgt, eeg, sid, aad = collate(batch)
            out = model(mix, eeg)
            loss, bd = total_loss(out["est"], tgt, out["sid_logits"], sid, out["aad_logits"], aad, weights)
            _check_finite(bd, step)
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            tlog.steps.append({"step": step, "epoch": epoch, "lr": lr, "total": bd.total, "mse": bd.mse,
                               "stft": bd.stft_mag, "sisdr": bd.si_sdr_loss, "sid": bd.sid_ce,
                               "aad": bd.aad_ce})
            step += 1
        model.calibrate(train_eeg)
        est, sid_pred, aad_pred = predict(model, data.val, config.eval_batch_size)
        val = _mean_si_sdri(est, data.val)
        row = {
            "epoch": epoch, "lr": lr,
            "train_total": float(np.mean([r["total"] for r in tlog.steps if r["epoch"] == epoch])),
            "val_si_sdri": val,
            "val_sid_acc": float(np.mean(sid_pred == [e.subject_id for e in data.val])),
            "val_aad_acc": float(np.mean(aad_pred == [e.attended_side for e in data.val])),
        }
        tlog.epochs.append(row)
        if progress:
            log.info("epoch %d lr %.3g loss %.4f val SI-SDRi %.2f dB sid %.2f aad %.2f", epoch, lr,
                     row["train_total"], val, row["val_sid_acc"], row["val_aad_acc"])
        if best is None or val > best[1]:
            best = (copy.deepcopy(model.state_dict()), val, epoch)
    state, val, epoch = best
    model.load_state_dict(state)
    ckpt = Checkpoint.from_model(model, config=config.to_dict(), epoch=epoch, val_si_sdri=val,
                                 rng=_rng_metadata(rng))
    return ckpt, tlog


def finite_difference_check(loss_fn, params, n_samples: int | None = 200, step: float = 1e-5,
                            seed: int = 0, floor: float = 1e-6):
    """Central differences versus autograd on sampled parameter entries.

    Entries are spread over every tensor in ``params`` (a name -> tensor
    mapping); ``n_samples=None`` checks every entry. Relative error is ``|g - fd| / max(|g|, |fd|, floor)``.
    Returns ``(max_rel_err, records)``.
    """
    rng = np.random.default_rng(seed)
    names = list(params)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = {k: params[k].grad.detach().clone() for k in names}
    per_tensor = None if n_samples is None else max(1, -(-n_samples // len(names)))
    records = []
    with torch.no_grad():
        for name in names:
            p = params[name]
            flat = p.view(-1)
            if per_tensor is None:
                picks = range(flat.numel())
            else:
                picks = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * step)
                g = grads[name].view(-1)[i].item()
                rel = abs(g - fd) / max(abs(g), abs(fd), floor)
                records.append({"param": name, "index": int(i), "analytic": g, "numeric": fd, "rel_err": rel})
    return max(r["rel_err"] for r in records), records


def randomize_parameters(model: torch.nn.Module, seed: int = 0, scale: float = 0.5) -> None:
    """Perturb every parameter so zero-initialised paths carry gradient."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype) / math.sqrt(max(1, p[0].numel() if p.dim() > 1 else 1)))


def grad_check(model: BMTSE | None = None, flags: AblationFlags | None = None, n_samples: int = 200,
               step: float = 1e-5, seed: int = 0, weights: LossWeights | None = None):
    """Finite-difference check of the total loss on the tiny configuration in
    float64. Returns ``(max_rel_err, records)``."""
    torch.manual_seed(seed)
    if model is None:
        cfg = ModelConfig.tiny()
        if flags is not None:
            cfg = apply_ablation(cfg, flags)
        model = BMTSE(cfg)
        randomize_parameters(model, seed)
    # eval mode: the head normalisation uses fixed running statistics, so the
    # loss is a pure function of the parameters
    model = model.double().eval()
    cfg = model.cfg
    gen = torch.Generator().manual_seed(seed + 1)
    b = 2
    mix = 0.5 * torch.randn(b, cfg.n_samples, generator=gen, dtype=torch.float64)
    eeg = torch.randn(b, cfg.eeg.channels, cfg.eeg.samples, generator=gen, dtype=torch.float64)
    sid = torch.arange(b) % cfg.n_subjects
    aad = torch.arange(b) % 2
    weights = weights or LossWeights()
    with torch.no_grad():
        # keep the mask sigmoid out of saturation so no gradient sinks below FD roundoff
        captured = {}
        hook = model.rebuilder.mask_conv.register_forward_hook(lambda m, i, o: captured.setdefault("pre", o))
        model(mix, eeg)
        hook.remove()
        model.rebuilder.mask_conv.weight /= captured["pre"].std()
        # a target near the current estimate keeps |loss| small, limiting FD roundoff
        est0 = model(mix, eeg)["est"]
        tgt = est0 + PROBE_TARGET_SPREAD * est0.std() * torch.randn(est0.shape, generator=gen, dtype=torch.float64)

    def loss_fn():
        out = model(mix, eeg)
        return total_loss(out["est"], tgt, out["sid_logits"], sid, out["aad_logits"], aad, weights)[0]

    params = OrderedDict(model.named_parameters())
    return finite_difference_check(loss_fn, params, n_samples, step, seed)
