"""Evaluation metrics: SI-SDR, SI-SDR improvement, STOI and ESTOI.

STOI/ESTOI follow the canonical definitions (10 kHz internal rate, 256-sample
frames, 15 one-third-octave bands from 150 Hz, 30-frame segments, -15 dB
clipping for STOI). Inputs at any other rate are resampled internally.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .dsp import frame_signal, resample_array
from .errors import DomainError, LengthError, ShapeError

SI_SDR_EPS = 1e-8

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
_EPS = np.finfo(np.float64).eps


@dataclass
class MetricsReport:
    si_sdr_db: float
    si_sdri_db: float
    stoi: float
    estoi: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _pair(est, ref):
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ShapeError(f"length mismatch: {est.shape} vs {ref.shape}")
    return est, ref


def si_sdr(est, ref, eps: float = SI_SDR_EPS) -> float:
    """Scale-invariant SDR in dB (no mean removal).

    The eps terms cap perfect reconstruction at roughly ``10*log10(|ref|^2/eps)``.
    """
    est, ref = _pair(est, ref)
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DomainError("reference signal is identically zero")
    s_target = (np.dot(est, ref) / ref_energy) * ref
    e = est - s_target
    return float(10.0 * np.log10((np.dot(s_target, s_target) + eps) / (np.dot(e, e) + eps)))


def si_sdri(est, ref, mix, eps: float = SI_SDR_EPS) -> float:
    mix = np.asarray(mix, dtype=np.float64)
    if mix.shape != np.shape(ref):
        raise ShapeError(f"mixture length {mix.shape} differs from reference {np.shape(ref)}")
    return si_sdr(est, ref, eps) - si_sdr(mix, ref, eps)


def thirdoct_matrix(fs: int = STOI_FS, nfft: int = STOI_NFFT, num_bands: int = STOI_BANDS,
                    min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    """Binary one-third-octave band matrix of shape (num_bands, nfft // 2 + 1)."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    cf = 2.0 ** (k / 3) * min_freq
    fl = np.sqrt(2.0 ** (k / 3) * min_freq * 2.0 ** ((k - 1) / 3) * min_freq)
    fh = np.sqrt(2.0 ** (k / 3) * min_freq * 2.0 ** ((k + 1) / 3) * min_freq)
    obm = np.zeros((num_bands, f.size))
    for i in range(len(cf)):
        lo = int(np.argmin((f - fl[i]) ** 2))
        hi = int(np.argmin((f - fh[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm


def _analysis_window(n: int = STOI_FRAME) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def remove_silent_frames(x, y, dyn_range=STOI_DYN_RANGE_DB, framelen=STOI_FRAME, hop=STOI_FRAME // 2):
    """Drop frames of the clean signal more than ``dyn_range`` dB below its
    loudest frame (from both signals) and overlap-add the rest back."""
    w = _analysis_window(framelen)
    x_frames = frame_signal(x, framelen, hop) * w
    y_frames = frame_signal(y, framelen, hop) * w
    energies = 20 * np.log10(np.linalg.norm(x_frames, axis=1) + _EPS)
    keep = (np.max(energies) - dyn_range - energies) < 0
    x_frames, y_frames = x_frames[keep], y_frames[keep]

    def ola(frames):
        n = frames.shape[0]
        out = np.zeros((n - 1) * hop + framelen) if n else np.zeros(0)
        for i in range(n):
            out[i * hop: i * hop + framelen] += frames[i]
        return out

    return ola(x_frames), ola(y_frames)


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    frames = frame_signal(x, STOI_FRAME, STOI_FRAME // 2) * _analysis_window()
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=-1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)  # (bands, frames)


def _prepare(est, ref, fs):
    est, ref = _pair(est, ref)
    if fs != STOI_FS:
        ref = resample_array(ref, fs, STOI_FS)
        est = resample_array(est, fs, STOI_FS)
    if ref.size < STOI_FRAME:
        raise LengthError("signal shorter than one STOI frame")
    ref, est = remove_silent_frames(ref, est)
    n_frames = 0 if ref.size < STOI_FRAME else 1 + (ref.size - STOI_FRAME) // (STOI_FRAME // 2)
    if n_frames < STOI_SEGMENT:
        raise LengthError(
            f"only {n_frames} non-silent frames; at least {STOI_SEGMENT} (384 ms) are required")
    obm = thirdoct_matrix()
    x_tob = _band_envelopes(ref, obm)
    y_tob = _band_envelopes(est, obm)
    # (segments, bands, N)
    idx = np.arange(STOI_SEGMENT, x_tob.shape[1] + 1)
    x_seg = np.stack([x_tob[:, m - STOI_SEGMENT: m] for m in idx])
    y_seg = np.stack([y_tob[:, m - STOI_SEGMENT: m] for m in idx])
    return x_seg, y_seg


def stoi(est, ref, fs: int) -> float:
    """Short-time objective intelligibility of ``est`` against clean ``ref``."""
    x_seg, y_seg = _prepare(est, ref, fs)
    norm = np.linalg.norm(x_seg, axis=2, keepdims=True) / (np.linalg.norm(y_seg, axis=2, keepdims=True) + _EPS)
    y_norm = y_seg * norm
    clip = 10 ** (-STOI_BETA_DB / 20)
    y_prime = np.minimum(y_norm, x_seg * (1 + clip))
    y_prime = y_prime - y_prime.mean(axis=2, keepdims=True)
    x_c = x_seg - x_seg.mean(axis=2, keepdims=True)
    y_prime /= np.linalg.norm(y_prime, axis=2, keepdims=True) + _EPS
    x_c /= np.linalg.norm(x_c, axis=2, keepdims=True) + _EPS
    corr = np.sum(y_prime * x_c, axis=2)
    return float(np.mean(corr))


def _row_col_normalize(seg: np.ndarray) -> np.ndarray:
    seg = seg - seg.mean(axis=2, keepdims=True)
    seg = seg / (np.linalg.norm(seg, axis=2, keepdims=True) + _EPS)
    seg = seg - seg.mean(axis=1, keepdims=True)
    return seg / (np.linalg.norm(seg, axis=1, keepdims=True) + _EPS)


def estoi(est, ref, fs: int) -> float:
    """Extended STOI: spectral-correlation over row/column normalised segments."""
    x_seg, y_seg = _prepare(est, ref, fs)
    x_n = _row_col_normalize(x_seg)
    y_n = _row_col_normalize(y_seg)
    return float(np.sum(x_n * y_n) / (STOI_SEGMENT * x_n.shape[0]))


def evaluate_pair(est, ref, mix, fs: int) -> MetricsReport:
    return MetricsReport(
        si_sdr_db=si_sdr(est, ref),
        si_sdri_db=si_sdri(est, ref, mix),
        stoi=stoi(est, ref, fs),
        estoi=estoi(est, ref, fs),
    )
