"""Command-line entry point: ``bmtse {synth,train,eval,ablate,melspec}``.

Every command writes its artifacts under ``--out DIR`` together with one
``run_manifest.json`` describing the invocation.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__, fileio
from .dsp import export_mel, mel_spectrogram, read_wav
from .errors import ConfigError
from .model import ABLATION_VARIANTS
from .synthdata import SynthConfig, make_dataset
from .training import Checkpoint, TrainConfig, evaluate_model, train

log = logging.getLogger("bmtse")

PRECEDENCE_NOTE = """\
configuration precedence (lowest to highest):
  1. built-in defaults
  2. values from --config FILE (INI sections [train], [weights], [ablation],
     [model], [model.eeg], [model.sep]; keys are field names)
  3. explicit command-line flags
"""


# ---------------------------------------------------------------- config file

def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, (list, tuple)):
        try:
            return type(default)(int(v) for v in raw.replace(",", " ").split())
        except ValueError as exc:
            raise ConfigError(f"{key}: expected integers, got {raw!r}") from exc
    if default is None or isinstance(default, float):
        if default is None and raw.lower() in ("", "none"):
            return None
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    return raw


def _apply_section(obj, section, name: str):
    known = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key not in known or dataclasses.is_dataclass(known[key]):
            raise ConfigError(f"[{name}] has no field {key!r}")
        updates[key] = _coerce(raw, known[key], f"[{name}] {key}")
    return dataclasses.replace(obj, **updates)


def load_train_config(path) -> TrainConfig:
    """Read a TrainConfig from an INI file; missing keys keep their defaults."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = TrainConfig()
    allowed = {"train", "weights", "ablation", "model", "model.eeg", "model.sep"}
    unknown = set(parser.sections()) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    model = cfg.model
    if parser.has_section("model.eeg"):
        model = dataclasses.replace(model, eeg=_apply_section(model.eeg, parser["model.eeg"], "model.eeg"))
    if parser.has_section("model.sep"):
        model = dataclasses.replace(model, sep=_apply_section(model.sep, parser["model.sep"], "model.sep"))
    if parser.has_section("model"):
        model = _apply_section(model, parser["model"], "model")
    weights = _apply_section(cfg.weights, parser["weights"], "weights") if parser.has_section("weights") \
        else cfg.weights
    ablation = _apply_section(cfg.ablation, parser["ablation"], "ablation") if parser.has_section("ablation") \
        else cfg.ablation
    cfg = dataclasses.replace(cfg, model=model, weights=weights, ablation=ablation)
    if parser.has_section("train"):
        cfg = _apply_section(cfg, parser["train"], "train")
    return cfg


TRAIN_FLAGS = {
    # flag dest -> (config group, field)
    "lr": ("train", "lr"), "lr_decay": ("train", "lr_decay"), "batch_size": ("train", "batch_size"),
    "epochs": ("train", "epochs"), "seed": ("train", "seed"), "grad_clip": ("train", "grad_clip"),
    "w1": ("weights", "w1"), "w2": ("weights", "w2"), "w3": ("weights", "w3"),
    "alpha": ("weights", "alpha"), "beta": ("weights", "beta"),
    "no_ls_tconv": ("ablation", "no_ls_tconv"), "no_sconv": ("ablation", "no_sconv"),
    "no_asg": ("ablation", "no_asg"), "no_sid_loss": ("ablation", "no_sid_loss"),
}


def resolve_train_config(args) -> TrainConfig:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    top, weights, ablation = {}, {}, {}
    for dest, (group, name) in TRAIN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        {"train": top, "weights": weights, "ablation": ablation}[group][name] = value
    return dataclasses.replace(
        cfg,
        weights=dataclasses.replace(cfg.weights, **weights),
        ablation=dataclasses.replace(cfg.ablation, **ablation),
        **top,
    )


def _fit_model_to_data(cfg: TrainConfig, data_dir) -> TrainConfig:
    """Match subject count, EEG geometry and audio length to the dataset."""
    manifest = fileio.load_manifest(data_dir)
    synth = manifest["config"]
    eeg = dataclasses.replace(cfg.model.eeg, channels=synth["channels"],
                              samples=int(round(synth["duration_s"] * synth["eeg_rate"])))
    model = dataclasses.replace(cfg.model, eeg=eeg, n_subjects=manifest["n_subjects"],
                                sample_rate=synth["audio_rate"],
                                n_samples=int(round(synth["duration_s"] * synth["audio_rate"])))
    return dataclasses.replace(cfg, model=model)


# ---------------------------------------------------------------- manifest

def write_run_manifest(out: Path, command: str, argv, config: dict, seed, inputs, outputs, status="ok"):
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config_hash": fileio.config_hash(config),
        "seed": seed,
        "input_hash": fileio.hash_files(inputs) if inputs else None,
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
        "status": status,
        "created_unix": time.time(),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _dataset_files(data_dir) -> list[Path]:
    return sorted(p for p in Path(data_dir).rglob("*") if p.is_file() and p.name != "run_manifest.json")


def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------- commands

def cmd_synth(args, out: Path):
    cfg = SynthConfig()
    if args.channels is not None:
        cfg = dataclasses.replace(cfg, channels=args.channels)
    split = make_dataset(args.subjects, args.trials, args.seed, cfg)
    fileio.export_dataset(split, out, args.seed, cfg)
    outputs = [p for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json"]
    config = {"synth": dataclasses.asdict(cfg), "subjects": args.subjects, "trials": args.trials}
    log.info("wrote %d trials to %s", len(split.all()), out)
    return config, args.seed, [], outputs


def _train_one(cfg: TrainConfig, data, out: Path, progress: bool):
    ckpt, tlog = train(cfg, data, progress=progress)
    ckpt_path = out / "checkpoint.bmtse"
    ckpt.save(ckpt_path)
    tlog.write_csv(out / "train_log.csv")
    tlog.write_epochs_csv(out / "epochs.csv")
    summary = {"best_epoch": ckpt.metadata["epoch"], "best_val_si_sdri": ckpt.metadata["val_si_sdri"],
               "epochs": tlog.epochs}
    _dump(out / "train_summary.json", summary)
    return ckpt, tlog, [ckpt_path, out / "train_log.csv", out / "epochs.csv", out / "train_summary.json"]


def cmd_train(args, out: Path):
    cfg = _fit_model_to_data(resolve_train_config(args), args.data)
    data = fileio.load_dataset(args.data)
    _dump(out / "train_config.json", cfg.to_dict())
    _, _, outputs = _train_one(cfg, data, out, progress=not args.quiet)
    return cfg.to_dict(), cfg.seed, _dataset_files(args.data), outputs + [out / "train_config.json"]


def cmd_eval(args, out: Path):
    ckpt = Checkpoint.load(args.checkpoint)
    data = fileio.load_dataset(args.data)
    examples = getattr(data, args.split)
    report = evaluate_model(ckpt, examples, intelligibility=not args.no_intelligibility)
    path = _dump(out / "metrics.json", report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))
    inputs = _dataset_files(args.data) + [Path(args.checkpoint)]
    return {"split": args.split, "checkpoint": ckpt.metadata.get("config")}, None, inputs, [path]


def cmd_ablate(args, out: Path):
    base = _fit_model_to_data(resolve_train_config(args), args.data)
    data = fileio.load_dataset(args.data)
    rows, outputs = [], []
    for name, flags in ABLATION_VARIANTS.items():
        cfg = dataclasses.replace(base, ablation=flags)
        vdir = out / name.lower().replace("/", "").replace(" ", "_").replace("-", "_")
        vdir.mkdir(parents=True, exist_ok=True)
        log.info("ablation variant %s", name)
        ckpt, _, files = _train_one(cfg, data, vdir, progress=not args.quiet)
        report = evaluate_model(ckpt, data.val, intelligibility=not args.no_intelligibility)
        rows.append({"variant": name, **report.to_dict(), "best_epoch": ckpt.metadata["epoch"]})
        outputs += files
    fields = ["variant", "si_sdr_db", "si_sdri_db", "stoi", "estoi", "sid_acc", "aad_acc", "best_epoch"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    table = format_table(rows, fields)
    (out / "ablation.md").write_text(table + "\n")
    print(table)
    outputs += [out / "ablation.csv", out / "ablation.md"]
    return base.to_dict(), base.seed, _dataset_files(args.data), outputs


def format_table(rows, fields) -> str:
    def cell(v):
        return f"{v:.3f}" if isinstance(v, float) else str(v)
    lines = ["| " + " | ".join(fields) + " |", "|" + "---|" * len(fields)]
    lines += ["| " + " | ".join(cell(r[f]) for f in fields) + " |" for r in rows]
    return "\n".join(lines)


def cmd_melspec(args, out: Path):
    wav = read_wav(args.wav)
    mel = mel_spectrogram(wav.samples, wav.sample_rate_hz, args.win_len, args.hop, args.n_mels)
    stem = out / Path(args.wav).stem
    export_mel(mel, stem)
    config = {"win_len": args.win_len, "hop": args.hop, "n_mels": args.n_mels}
    outputs = [stem.with_suffix(s) for s in (".csv", ".pgm", ".json")]
    return config, None, [Path(args.wav)], outputs


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory written by `synth`")
    p.add_argument("--config", help="INI file with TrainConfig values")
    g = p.add_argument_group("training overrides (take precedence over --config)")
    g.add_argument("--lr", type=float)
    g.add_argument("--lr-decay", dest="lr_decay", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--grad-clip", dest="grad_clip", type=float)
    for w in ("w1", "w2", "w3", "alpha", "beta"):
        g.add_argument(f"--{w}", type=float)
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress lines")
    p.add_argument("--no-intelligibility", action="store_true", help="skip STOI/ESTOI in evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bmtse", description="EEG-guided target speaker extraction toolkit",
                     epilog=PRECEDENCE_NOTE, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=PRECEDENCE_NOTE
                           if name in ("train", "ablate") else None,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--out", required=True, type=Path, help="output directory")
        return p

    p = add("synth", "generate a synthetic dataset")
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--trials", type=int, default=32, help="trials per subject")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int)

    p = add("train", "train one model and keep the best validation checkpoint")
    _add_train_flags(p)
    flags = p.add_argument_group("ablation flags")
    for f in ("no-ls-tconv", "no-sconv", "no-asg", "no-sid-loss"):
        flags.add_argument(f"--{f}", dest=f.replace("-", "_"), action="store_const", const=True)

    p = add("eval", "evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--no-intelligibility", action="store_true")

    p = add("ablate", "train the full model and its four ablations with one seed")
    _add_train_flags(p)

    p = add("melspec", "log-mel spectrogram of a WAV file as CSV, PGM and JSON")
    p.add_argument("wav")
    p.add_argument("--win-len", dest="win_len", type=int, default=256)
    p.add_argument("--hop", type=int, default=128)
    p.add_argument("--n-mels", dest="n_mels", type=int, default=40)
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "melspec": cmd_melspec}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    out: Path = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"bmtse: error: cannot create {out}: {exc}", file=sys.stderr)
        return 1
    try:
        config, seed, inputs, outputs = COMMANDS[args.command](args, out)
    except ConfigError as exc:  # invalid configuration counts as a usage error
        print(f"bmtse {args.command}: configuration error: {exc}", file=sys.stderr)
        write_run_manifest(out, args.command, argv, {}, None, [], [], status=f"error: {exc}")
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        log.debug("failure", exc_info=True)
        print(f"bmtse {args.command}: error: {exc}", file=sys.stderr)
        write_run_manifest(out, args.command, argv, {}, None, [], [], status=f"error: {exc}")
        return 1
    write_run_manifest(out, args.command, argv, config, seed, inputs, outputs)
    return 0


def main() -> None:
    sys.exit(run())
