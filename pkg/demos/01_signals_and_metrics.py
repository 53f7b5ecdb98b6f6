"""Signal front end and evaluation metrics on a synthetic trial.

Builds one cocktail-party mixture, checks the STFT round trip, computes a
mel spectrogram and scores the mixture and a few degraded targets.

    python3 demos/01_signals_and_metrics.py
"""

import numpy as np

from bmtse import dsp, metrics
from bmtse.synthdata import make_subjects, synth_trial

subject = make_subjects(2, seed=0)[0]
trial = synth_trial(subject, attended_side=0, seed=7)
fs = trial.mixture.sample_rate_hz
mix, target = trial.mixture.samples, trial.target.samples

spec = dsp.stft(mix)
back = dsp.istft(spec, out_len=mix.size)
interior = slice(256, -256)
print(f"STFT {spec.frames.shape}, round-trip max error {np.max(np.abs(back - mix)[interior]):.2e}")

mel = dsp.mel_spectrogram(mix, fs, n_mels=40)
print(f"mel spectrogram {mel.frames.shape}, log-energy range "
      f"[{mel.frames.min():.1f}, {mel.frames.max():.1f}]")

rng = np.random.default_rng(0)
print("\nestimate                 SI-SDR   SI-SDRi  STOI   ESTOI")
candidates = {"mixture": mix, "target": target}
for snr in (0, 10, 20):
    noise = rng.standard_normal(target.size)
    noise *= np.sqrt(np.mean(target ** 2) / np.mean(noise ** 2)) * 10 ** (-snr / 20)
    candidates[f"target + noise {snr:>2} dB"] = target + noise
for name, est in candidates.items():
    r = metrics.evaluate_pair(est, target, mix, fs)
    print(f"{name:<22} {r.si_sdr_db:7.2f} {r.si_sdri_db:8.2f}  {r.stoi:.3f}  {r.estoi:.3f}")
