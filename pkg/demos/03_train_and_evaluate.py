"""Train the full model on synthetic data and evaluate the best checkpoint.

Uses configs/desk.ini (the settings the learnability check runs with).
Each epoch takes a few seconds on one CPU core.

    python3 demos/03_train_and_evaluate.py [epochs]
"""

import dataclasses
import sys
import tempfile
from pathlib import Path

from bmtse.cli import load_train_config
from bmtse.model import BMTSE, ModelConfig
from bmtse.synthdata import make_dataset
from bmtse.training import Checkpoint, evaluate_model, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 6
cfg = load_train_config(Path(__file__).resolve().parents[1] / "configs" / "desk.ini")
cfg = dataclasses.replace(cfg, epochs=epochs)
data = make_dataset(n_subjects=4, trials_per_subject=32, seed=cfg.seed)

untrained = evaluate_model(BMTSE(ModelConfig()), data.test, intelligibility=False)
print(f"untrained: SI-SDRi {untrained.si_sdri_db:+.2f} dB (output is half the mixture)")

ckpt, log = train(cfg, data)
print("\nepoch  lr        train loss  val SI-SDRi  SID   AAD")
for r in log.epochs:
    print(f"{r['epoch']:5d}  {r['lr']:.2e}  {r['train_total']:10.3f}  {r['val_si_sdri']:8.2f} dB "
          f"{r['val_sid_acc']:5.2f} {r['val_aad_acc']:5.2f}")
print(f"kept epoch {ckpt.metadata['epoch']} (best validation SI-SDRi)")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.bmtse"
    ckpt.save(path)
    report = evaluate_model(Checkpoint.load(path), data.test)
print(f"\ntest: SI-SDR {report.si_sdr_db:.2f} dB, SI-SDRi {report.si_sdri_db:.2f} dB, "
      f"STOI {report.stoi:.3f}, ESTOI {report.estoi:.3f}, SID {report.sid_acc:.2f}, AAD {report.aad_acc:.2f}")
