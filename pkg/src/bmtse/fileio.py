"""On-disk formats: EEG binaries with JSON sidecars, EEG CSV fixtures and
exported datasets (WAV audio + EEG binaries + a JSON manifest)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dsp import Waveform, read_wav, write_wav
from .errors import FormatError
from .synthdata import EEG_RATE, DatasetSplit, EegBatch, SynthConfig, TrialExample

PARTITIONS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"


def config_hash(obj) -> str:
    """SHA-256 of the canonical (sorted-key) JSON form of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list).encode()
    return hashlib.sha256(blob).hexdigest()


def write_eeg_binary(stem, data: np.ndarray, rate_hz: int = EEG_RATE) -> tuple[Path, Path]:
    """Write (C, T) as little-endian float32 to ``stem.f32`` plus ``stem.json``."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise FormatError(f"EEG array must be (channels, samples), got {data.shape}")
    stem = Path(stem)
    raw, side = stem.with_suffix(".f32"), stem.with_suffix(".json")
    raw.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    side.write_text(json.dumps({"channels": int(data.shape[0]), "samples": int(data.shape[1]),
                                "rate_hz": int(rate_hz)}, sort_keys=True))
    return raw, side


def read_eeg_binary(path) -> tuple[np.ndarray, int]:
    """Read an EEG binary (``.f32``) using its JSON sidecar; returns (data, rate)."""
    raw = Path(path).with_suffix(".f32")
    side = raw.with_suffix(".json")
    try:
        meta = json.loads(side.read_text())
        c, t, rate = int(meta["channels"]), int(meta["samples"]), int(meta["rate_hz"])
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{side}: missing or malformed sidecar") from exc
    buf = raw.read_bytes()
    if len(buf) != 4 * c * t:
        raise FormatError(f"{raw}: {len(buf)} bytes, sidecar implies {4 * c * t}")
    return np.frombuffer(buf, dtype="<f4").reshape(c, t).astype(np.float64), rate


def write_eeg_csv(path, data: np.ndarray) -> None:
    np.savetxt(path, np.asarray(data, dtype=np.float64), delimiter=",", fmt="%.9g")


def read_eeg_csv(path) -> np.ndarray:
    """One row per channel."""
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: not a numeric CSV") from exc
    return data


def export_dataset(split: DatasetSplit, out_dir, seed: int, cfg: SynthConfig | None = None,
                   extra: dict | None = None) -> Path:
    """Write every trial as ``<part>/<index>_{mixture,target}.wav`` plus
    ``<index>_eeg.f32/.json`` and a manifest with labels and a config hash."""
    cfg = cfg or SynthConfig()
    out = Path(out_dir)
    trials = []
    for part in PARTITIONS:
        pdir = out / part
        pdir.mkdir(parents=True, exist_ok=True)
        for i, ex in enumerate(getattr(split, part)):
            stem = f"{i:04d}"
            write_wav(pdir / f"{stem}_mixture.wav", ex.mixture)
            write_wav(pdir / f"{stem}_target.wav", ex.target)
            write_eeg_binary(pdir / f"{stem}_eeg", ex.eeg.data[0], ex.eeg.sample_rate_hz)
            trials.append({"partition": part, "stem": f"{part}/{stem}", "subject_id": ex.subject_id,
                           "attended_side": ex.attended_side, "seed": ex.seed})
    config = asdict(cfg)
    manifest = {
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
        "n_subjects": len({t["subject_id"] for t in trials}),
        "trials": trials,
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out / MANIFEST_NAME


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"{path}: dataset manifest not found") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed manifest") from exc


def load_dataset(data_dir) -> DatasetSplit:
    """Inverse of :func:`export_dataset`; the interferer is recovered as
    mixture minus target."""
    root = Path(data_dir)
    manifest = load_manifest(root)
    parts: dict[str, list] = {p: [] for p in PARTITIONS}
    for t in manifest["trials"]:
        base = root / t["stem"]
        mix = read_wav(f"{base}_mixture.wav")
        tgt = read_wav(f"{base}_target.wav")
        eeg, rate = read_eeg_binary(f"{base}_eeg.f32")
        parts[t["partition"]].append(TrialExample(
            mixture=mix,
            target=tgt,
            interferer=Waveform(mix.samples - tgt.samples, mix.sample_rate_hz),
            eeg=EegBatch(eeg[None], rate),
            subject_id=int(t["subject_id"]),
            attended_side=int(t["attended_side"]),
            seed=int(t["seed"]),
        ))
    return DatasetSplit(parts["train"], parts["val"], parts["test"])


def hash_files(paths) -> str:
    """Content hash over files (sorted by path), in the style of a git tree hash."""
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        data = p.read_bytes()
        h.update(f"blob {len(data)}\0".encode())
        h.update(data)
    return h.hexdigest()
