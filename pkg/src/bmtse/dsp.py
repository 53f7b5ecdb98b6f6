"""Signal-processing primitives: STFT/ISTFT, mel spectrogram, resampling,
zero-phase biquad filtering, and WAV / mel-spectrogram file I/O.

Everything here operates on numpy arrays along the last axis and is pure.
"""

from __future__ import annotations

import json
import re
import wave
from functools import lru_cache
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal, special

from .errors import ConfigError, LengthError

FLOOR_EPS = 1e-10
RESAMPLE_HALF_TAPS = 16
RESAMPLE_KAISER_BETA = 8.0


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ConfigError("Waveform must be mono (1-D samples)")
        if self.sample_rate_hz < 1000:
            raise ConfigError(f"sample rate {self.sample_rate_hz} Hz below 1000 Hz")
        if not np.all(np.isfinite(self.samples)):
            raise ConfigError("Waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class ComplexSpectrogram:
    frames: np.ndarray  # (..., F, K) complex
    win_len: int
    hop: int
    window: str = "hann"

    @property
    def n_frames(self) -> int:
        return self.frames.shape[-2]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[-1]


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (F, M) log energies
    mel_lo_hz: float
    mel_hi_hz: float

    @property
    def n_mels(self) -> int:
        return self.frames.shape[-1]


def hann_window(win_len: int) -> np.ndarray:
    """Periodic Hann window (satisfies COLA at hop = win_len / 2**k)."""
    n = np.arange(win_len)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_len)


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def frame_signal(x: np.ndarray, win_len: int, hop: int) -> np.ndarray:
    """Strided view of x as (..., F, win_len) frames without padding."""
    n_frames = 1 + (x.shape[-1] - win_len) // hop
    idx = hop * np.arange(n_frames)[:, None] + np.arange(win_len)[None, :]
    return x[..., idx]


def stft(x: np.ndarray, win_len: int = 256, hop: int = 128) -> ComplexSpectrogram:
    """Hann-windowed STFT with ``1 + (len - win_len) // hop`` frames and
    ``win_len // 2 + 1`` bins. No edge padding is applied."""
    x = np.asarray(x, dtype=np.float64)
    if not _is_pow2(win_len):
        raise ConfigError(f"win_len must be a power of two, got {win_len}")
    if hop < 1 or hop > win_len:
        raise ConfigError(f"hop must lie in [1, win_len], got {hop}")
    if x.shape[-1] < win_len:
        raise LengthError(f"signal of {x.shape[-1]} samples shorter than window {win_len}")
    frames = frame_signal(x, win_len, hop) * hann_window(win_len)
    return ComplexSpectrogram(np.fft.rfft(frames, n=win_len, axis=-1), win_len, hop)


def istft(spec: ComplexSpectrogram, out_len: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Samples covered by fewer than ``win_len // hop`` frames (the first and
    last ``win_len - hop`` samples) are reconstructed by window-energy
    normalisation where it is nonzero and left at zero otherwise.
    """
    win_len, hop = spec.win_len, spec.hop
    if win_len % hop != 0:
        raise ConfigError(f"hop {hop} does not divide win_len {win_len}; Hann overlap-add is not COLA")
    frames = np.fft.irfft(spec.frames, n=win_len, axis=-1)
    w = hann_window(win_len)
    n_frames = frames.shape[-2]
    total = (n_frames - 1) * hop + win_len
    lead = frames.shape[:-2]
    y = np.zeros(lead + (total,))
    norm = np.zeros(total)
    for f in range(n_frames):
        sl = slice(f * hop, f * hop + win_len)
        y[..., sl] += frames[..., f, :] * w
        norm[sl] += w * w
    nz = norm > 1e-8
    y[..., nz] /= norm[nz]
    y[..., ~nz] = 0.0
    if out_len is not None:
        if out_len <= total:
            y = y[..., :out_len]
        else:
            y = np.concatenate([y, np.zeros(lead + (out_len - total,))], axis=-1)
    return y


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   f_lo: float = 0.0, f_hi: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filterbank of shape (n_mels, n_fft // 2 + 1)."""
    if n_mels < 4:
        raise ConfigError(f"n_mels must be >= 4, got {n_mels}")
    f_hi = sample_rate / 2 if f_hi is None else f_hi
    edges = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mel_spectrogram(x: np.ndarray, sample_rate: int, win_len: int = 256, hop: int = 128,
                    n_mels: int = 40, floor_eps: float = FLOOR_EPS) -> MelSpectrogram:
    spec = stft(x, win_len, hop)
    power = np.abs(spec.frames) ** 2
    fb = mel_filterbank(n_mels, win_len, sample_rate)
    mel = power @ fb.T
    return MelSpectrogram(np.log(np.maximum(mel, floor_eps)), 0.0, sample_rate / 2)


def resample_array(x: np.ndarray, source_hz: float, target_hz: float) -> np.ndarray:
    """Kaiser-windowed sinc interpolation along the last axis.

    Uses 16 taps on each side of every output instant (measured at the lower
    of the two rates) and normalises each output's weights to unit sum, so
    constant signals pass through exactly.
    """
    if target_hz <= 0 or source_hz <= 0:
        raise ConfigError(f"sample rates must be positive, got {source_hz} -> {target_hz}")
    x = np.asarray(x, dtype=np.float64)
    if source_hz == target_hz:
        return x.copy()
    n_in = x.shape[-1]
    idx, h = _resample_kernel(n_in, float(source_hz), float(target_hz))
    gathered = x[..., idx]
    return np.einsum("...nk,nk->...n", gathered, h)


@lru_cache(maxsize=32)
def _resample_kernel(n_in: int, source_hz: float, target_hz: float):
    n_out = int(round(n_in * target_hz / source_hz))
    ratio = source_hz / target_hz
    cutoff = min(1.0, target_hz / source_hz)  # relative to the input Nyquist
    half = RESAMPLE_HALF_TAPS / cutoff  # support in input samples
    pos = np.arange(n_out) * ratio
    base = np.floor(pos).astype(np.int64)
    offs = np.arange(-int(np.ceil(half)) + 1, int(np.ceil(half)) + 1)
    idx = base[:, None] + offs[None, :]
    dist = pos[:, None] - idx
    u = np.clip(dist / half, -1.0, 1.0)
    win = special.i0(RESAMPLE_KAISER_BETA * np.sqrt(1.0 - u * u)) / special.i0(RESAMPLE_KAISER_BETA)
    win[np.abs(dist) >= half] = 0.0
    h = cutoff * np.sinc(cutoff * dist) * win
    h = np.where((idx >= 0) & (idx < n_in), h, 0.0)
    h /= h.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, n_in - 1)
    idx.flags.writeable = False
    h.flags.writeable = False
    return idx, h


def resample(w: Waveform, target_hz: int) -> Waveform:
    if target_hz < 1000:
        raise ConfigError(f"audio target rate {target_hz} Hz below 1000 Hz; use resample_array")
    return Waveform(resample_array(w.samples, w.sample_rate_hz, target_hz), target_hz)


def biquad_filter(x: np.ndarray, sample_rate: float, kind: str, f_lo: float,
                  f_hi: float | None = None, q: float = 30.0) -> np.ndarray:
    """Zero-phase second-order-section filter along the last axis.

    ``kind="bandpass"`` passes [f_lo, f_hi] with a 2nd-order Butterworth
    design (two biquads); ``kind="notch"`` removes ``f_lo`` with quality ``q``.
    Both are run forward and backward.
    """
    nyq = sample_rate / 2
    x = np.asarray(x, dtype=np.float64)
    if kind == "bandpass":
        if f_hi is None or not (0 < f_lo < f_hi < nyq):
            raise ConfigError(f"band edges ({f_lo}, {f_hi}) must satisfy 0 < lo < hi < {nyq}")
        sos = signal.butter(2, [f_lo, f_hi], btype="bandpass", fs=sample_rate, output="sos")
    elif kind == "notch":
        if not 0 < f_lo < nyq:
            raise ConfigError(f"notch frequency {f_lo} outside (0, {nyq})")
        if q <= 0:
            raise ConfigError("notch q must be positive")
        b, a = signal.iirnotch(f_lo, q, fs=sample_rate)
        sos = signal.tf2sos(b, a)
    else:
        raise ConfigError(f"unknown filter kind {kind!r}")
    return signal.sosfiltfilt(sos, x, axis=-1)


def write_wav(path, w: Waveform) -> None:
    """16-bit PCM mono WAV; samples are clipped to [-1, 1]."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate_hz))
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise ConfigError(f"{path}: only 16-bit mono PCM is supported")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, rate)


def export_mel(mel: MelSpectrogram, stem) -> dict:
    """Write ``stem.csv`` (row = frame), ``stem.pgm`` (8-bit, rows = mel bands,
    low frequencies at the bottom) and a ``stem.json`` sidecar with the
    affine map's min/max. Returns the sidecar dict."""
    stem = Path(stem)
    frames = mel.frames
    np.savetxt(stem.with_suffix(".csv"), frames, delimiter=",", fmt="%.9g")
    lo, hi = float(frames.min()), float(frames.max())
    if hi > lo:
        img = np.round((frames - lo) / (hi - lo) * 255.0)
    else:
        img = np.zeros_like(frames)
    img = img.T[::-1].astype(np.uint8)
    with open(stem.with_suffix(".pgm"), "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    meta = {"min": lo, "max": hi, "n_frames": int(frames.shape[0]), "n_mels": int(frames.shape[1]),
            "mel_lo_hz": mel.mel_lo_hz, "mel_hi_hz": mel.mel_hi_hz}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return meta


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ConfigError(f"{path}: not a binary PGM")
    width, height = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data[m.end(): m.end() + width * height], dtype=np.uint8).reshape(height, width)
