"""Surrogate EEG and the EEG encoder.

Generates a small synthetic dataset, shows what separates subjects and
subjects in the raw EEG, then runs the (untrained) encoder and looks at
the token layout and the adaptive spectral gain.

    python3 demos/02_eeg_and_encoder.py
"""

import numpy as np
import torch

from bmtse.eeg_encoder import AdaptiveSpectralGain, EEGEncoder, EncoderConfig
from bmtse.synthdata import make_dataset

data = make_dataset(n_subjects=4, trials_per_subject=32, seed=0)
print(f"train/val/test: {len(data.train)}/{len(data.val)}/{len(data.test)} trials")
ex = data.train[0]
print(f"mixture {ex.mixture.samples.shape} @ {ex.mixture.sample_rate_hz} Hz, "
      f"EEG {ex.eeg.data.shape} @ {ex.eeg.sample_rate_hz} Hz")

# subject identity lives in the channel covariance
covs = {s: [] for s in range(4)}
for e in data.train:
    x = e.eeg.data[0]
    covs[e.subject_id].append(np.cov(x)[np.triu_indices(x.shape[0], 1)])
means = np.array([np.mean(v, axis=0) for v in covs.values()])
within = np.mean([np.std(v, axis=0).mean() for v in covs.values()])
print(f"channel-covariance spread: between subjects {means.std(axis=0).mean():.3f}, "
      f"within subject {within:.3f}")

enc = EEGEncoder(EncoderConfig())
eeg = torch.tensor(np.concatenate([e.eeg.data for e in data.train[:8]]), dtype=torch.float32)
with torch.no_grad():
    out = enc(eeg)
print(f"fused embedding {tuple(out.data.shape)}: {out.temporal_token_count} temporal tokens "
      f"+ {out.data.shape[1] - out.temporal_token_count} electrode tokens")

asg = AdaptiveSpectralGain(4, 2, 5, 1e-6)
e_in = torch.randn(1, 4, 12)
with torch.no_grad():
    y = asg(e_in)
gate = y[:, :4] / e_in
print(f"ASG doubles the feature axis {tuple(e_in.shape)} -> {tuple(y.shape)}; "
      f"gate values in [{gate.min():.3f}, {gate.max():.3f}]")

print(f"val trials attending the left stream: {sum(e.attended_side == 0 for e in data.val)}/{len(data.val)}")
