"""Synthetic cocktail-party trials with surrogate EEG.

Each trial has two amplitude-modulated harmonic complexes: a low-pitched
"left" stream with slow envelopes and a higher "right" stream with faster
envelopes, mixed at 0 dB. The surrogate EEG is a subject-specific spatial
mixing (the fingerprint) of lagged copies of the attended envelope, a weaker
copy of the unattended envelope and Gaussian background noise, at 128 Hz.
Each subject also has its own background noise level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import Waveform, resample_array
from .eeg_encoder import standardize_eeg
from .errors import ConfigError

AUDIO_RATE = 8000
EEG_RATE = 128
SPLIT_RATIOS = (0.75, 0.125, 0.125)

LEFT, RIGHT = 0, 1


@dataclass
class SynthConfig:
    channels: int = 16
    n_features: int = 8
    duration_s: float = 2.0
    audio_rate: int = AUDIO_RATE
    eeg_rate: int = EEG_RATE
    eeg_noise_std: float = 0.5
    noise_spread: float = 1.0  # log2 half-range of per-subject noise levels
    distractor_leak: float = 0.2
    feature_lag: int = 4  # EEG samples between successive envelope copies
    peak: float = 0.9
    # per side: (f0 range Hz, harmonic numbers, envelope modulation range Hz)
    left_f0: tuple = (100.0, 150.0)
    left_harmonics: tuple = (1, 6)
    left_am: tuple = (1.5, 3.5)
    right_f0: tuple = (260.0, 340.0)
    right_harmonics: tuple = (4, 11)
    right_am: tuple = (4.5, 7.5)

    @property
    def n_audio(self) -> int:
        return int(round(self.duration_s * self.audio_rate))

    @property
    def n_eeg(self) -> int:
        return int(round(self.duration_s * self.eeg_rate))


@dataclass
class SubjectProfile:
    subject_id: int
    fingerprint: np.ndarray  # (C, K), unit-norm rows
    eeg_noise_std: float = 0.5


@dataclass
class EegBatch:
    data: np.ndarray  # (B, C, T)
    sample_rate_hz: int = EEG_RATE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ConfigError(f"EEG batch must be B x C x T, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("EEG batch contains non-finite values")


@dataclass
class TrialExample:
    mixture: Waveform
    target: Waveform
    interferer: Waveform
    eeg: EegBatch
    subject_id: int
    attended_side: int
    seed: int = 0


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    ratios: tuple = field(default=SPLIT_RATIOS)

    def all(self) -> list:
        return self.train + self.val + self.test


def fingerprint_correlation(a: np.ndarray, b: np.ndarray) -> float:
    return float(abs(np.corrcoef(a.ravel(), b.ravel())[0, 1]))


def make_subjects(n: int, channels: int = 16, n_features: int = 8, seed: int = 0,
                  noise_std: float = 0.5, max_corr: float = 0.5,
                  noise_spread: float = 1.0) -> list[SubjectProfile]:
    """Random unit-row fingerprints with pairwise |correlation| < ``max_corr``.

    Noise levels are ``noise_std * 2**u`` with u evenly spaced over
    [-noise_spread, noise_spread], assigned to subjects in random order.
    """
    if n < 2:
        raise ConfigError(f"need at least 2 subjects, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B]))
    prints: list[np.ndarray] = []
    while len(prints) < n:
        f = rng.standard_normal((channels, n_features))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        if all(fingerprint_correlation(f, g) < max_corr for g in prints):
            prints.append(f)
    levels = noise_std * 2.0 ** np.linspace(-noise_spread, noise_spread, n)
    levels = levels[rng.permutation(n)]
    return [SubjectProfile(i, f, float(s)) for i, (f, s) in enumerate(zip(prints, levels))]


def _envelope(rng, t, am_range):
    freqs = rng.uniform(*am_range, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    m = np.sum(np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None]), axis=0)
    return 0.1 + 0.9 * (m - m.min()) / (m.max() - m.min())


def _harmonic_complex(rng, t, f0_range, harmonics, nyquist):
    f0 = rng.uniform(*f0_range)
    ks = np.arange(harmonics[0], harmonics[1] + 1)
    ks = ks[ks * f0 < 0.95 * nyquist]
    phases = rng.uniform(0, 2 * np.pi, size=ks.size)
    return np.sum(np.sin(2 * np.pi * f0 * ks[:, None] * t + phases[:, None]) / np.sqrt(ks)[:, None], axis=0)


def envelope_features(env: np.ndarray, n_features: int, lag: int) -> np.ndarray:
    """(K, T) lagged copies of the standardized envelope (edge-held)."""
    z = (env - env.mean()) / (env.std() + 1e-12)
    pad = np.concatenate([np.full(lag * (n_features - 1), z[0]), z])
    n = z.size
    return np.stack([pad[lag * (n_features - 1) - lag * k:][:n] for k in range(n_features)])


def synth_sources(cfg: SynthConfig, rng):
    """Left and right source waveforms plus their envelopes at the EEG rate."""
    t = np.arange(cfg.n_audio) / cfg.audio_rate
    out = []
    for f0, harm, am in ((cfg.left_f0, cfg.left_harmonics, cfg.left_am),
                         (cfg.right_f0, cfg.right_harmonics, cfg.right_am)):
        env = _envelope(rng, t, am)
        carrier = _harmonic_complex(rng, t, f0, harm, cfg.audio_rate / 2)
        src = env * carrier
        src /= np.sqrt(np.mean(src ** 2))
        env_eeg = resample_array(env, cfg.audio_rate, cfg.eeg_rate)
        out.append((src, env_eeg))
    return out


def synth_trial(subject: SubjectProfile, attended_side: int, seed: int,
                cfg: SynthConfig | None = None) -> TrialExample:
    cfg = cfg or SynthConfig()
    if attended_side not in (LEFT, RIGHT):
        raise ConfigError(f"attended_side must be 0 or 1, got {attended_side}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, subject.subject_id, attended_side]))
    (left, env_l), (right, env_r) = synth_sources(cfg, rng)
    target, interferer = (left, right) if attended_side == LEFT else (right, left)
    env_att, env_un = (env_l, env_r) if attended_side == LEFT else (env_r, env_l)
    scale = cfg.peak / np.max(np.abs(target + interferer))
    target = target * scale
    interferer = interferer * scale
    mixture = target + interferer

    fp = subject.fingerprint
    k = fp.shape[1]
    eeg = fp @ envelope_features(env_att, k, cfg.feature_lag)
    eeg += cfg.distractor_leak * (fp @ envelope_features(env_un, k, cfg.feature_lag))
    eeg += subject.eeg_noise_std * rng.standard_normal(eeg.shape)
    eeg = standardize_eeg(eeg)

    return TrialExample(
        mixture=Waveform(mixture, cfg.audio_rate),
        target=Waveform(target, cfg.audio_rate),
        interferer=Waveform(interferer, cfg.audio_rate),
        eeg=EegBatch(eeg[None], cfg.eeg_rate),
        subject_id=subject.subject_id,
        attended_side=attended_side,
        seed=seed,
    )


def _covers(trials, n_subjects) -> bool:
    return (len({t.subject_id for t in trials}) == n_subjects
            and len({t.attended_side for t in trials}) == 2)


def make_split(subjects: list[SubjectProfile], trials_per_subject: int = 32, seed: int = 0,
               cfg: SynthConfig | None = None, max_tries: int = 1000) -> DatasetSplit:
    """Balanced left/right trials per subject, shuffled and split 75/12.5/12.5
    with every subject and both attention labels present in each part."""
    if trials_per_subject < 8:
        raise ConfigError(f"trials_per_subject must be >= 8, got {trials_per_subject}")
    n_total = len(subjects) * trials_per_subject
    n_val = int(round(n_total * SPLIT_RATIOS[1]))
    n_test = int(round(n_total * SPLIT_RATIOS[2]))
    n_train = n_total - n_val - n_test
    if min(n_val, n_test) < max(len(subjects), 2):
        raise ConfigError(f"{n_total} trials cannot cover {len(subjects)} subjects in every partition")

    trials = []
    for s in subjects:
        for i in range(trials_per_subject):
            trial_seed = int(np.random.SeedSequence([seed, s.subject_id, i]).generate_state(1)[0])
            trials.append(synth_trial(s, i % 2, trial_seed, cfg))

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5717]))
    for _ in range(max_tries):
        order = rng.permutation(n_total)
        parts = [[trials[i] for i in idx] for idx in
                 (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])]
        if all(_covers(p, len(subjects)) for p in parts):
            return DatasetSplit(*parts)
    raise ConfigError("could not find a split covering every subject and label")


def make_dataset(n_subjects: int = 4, trials_per_subject: int = 32, seed: int = 0,
                 cfg: SynthConfig | None = None) -> DatasetSplit:
    cfg = cfg or SynthConfig()
    subjects = make_subjects(n_subjects, cfg.channels, cfg.n_features, seed, cfg.eeg_noise_std,
                             noise_spread=cfg.noise_spread)
    return make_split(subjects, trials_per_subject, seed, cfg)
