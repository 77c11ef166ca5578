"""``cmvim`` command line.

Subcommands: ``gen``, ``pretrain``, ``finetune``, ``eval``, ``params``, ``selftest``.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

``--config`` accepts a ``key = value`` file, a preset name (``toy``,
``full``) or a ``run.json`` written by an earlier run, which replays that
run's resolved configuration.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ModelConfig, TrainConfig, load_config, preset
from .data import SPLITS, SyntheticSpec, VolumeFormatError, generate, read_dataset, split, write_dataset

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MANIFEST_NAME = "run.json"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

def build_id() -> str:
    """``git describe``-style identifier of the source tree, or the package version outside git."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """One JSON record per run: command, resolved config, build id, seed, timestamps, outputs."""

    def __init__(self, command: str, argv: list[str], config: dict, seed: int):
        self.record = {"command": command, "argv": argv, "config": config, "build": build_id(),
                       "seed": seed, "started": _now(), "finished": None, "outputs": {}}

    def output(self, key: str, path) -> None:
        self.record["outputs"][key] = str(path)

    def write(self, directory) -> Path:
        self.record["finished"] = _now()
        path = Path(directory) / MANIFEST_NAME
        path.write_text(json.dumps(self.record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _config_dict(model: ModelConfig, train: TrainConfig) -> dict:
    return {"model": dataclasses.asdict(model), "train": dataclasses.asdict(train)}


def resolve_config(ref: str) -> tuple[ModelConfig, TrainConfig]:
    path = Path(ref)
    if path.suffix == ".json" and path.exists():
        rec = json.loads(path.read_text(encoding="utf-8"))
        try:
            cfg = rec["config"]
            return ModelConfig(**cfg["model"]).validate(), TrainConfig(**cfg["train"]).validate()
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{ref}: not a run manifest with a model/train config ({exc})") from None
    if path.exists():
        return load_config(path)
    if path.suffix == "" and "/" not in ref:
        return preset(ref)
    raise UsageError(f"config file not found: {ref}")


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = SyntheticSpec()
    if args.spec:
        spec = SyntheticSpec.from_text(_require(args.spec, "spec file").read_text(encoding="utf-8"))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    if args.n is not None:
        spec = dataclasses.replace(spec, n_samples=args.n)
    spec.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunManifest("gen", sys.argv[1:], {"spec": dataclasses.asdict(spec)}, spec.seed)
    ds = generate(spec)
    parts = split(len(ds), (args.train_frac, args.val_frac, 1.0 - args.train_frac - args.val_frac), spec.seed)
    write_dataset(out, ds, dict(zip(SPLITS, parts)))
    for name, idx in zip(SPLITS, parts):
        run.output(name, out / name)
        print(f"{name}\t{len(idx)}\t" + "\t".join(str(int(np.sum(ds.labels[idx] == k))) for k in range(3)))
    run.write(out)
    return EXIT_OK


def _load_data(root: str):
    data = read_dataset(_require(root, "data directory"))
    if "train" not in data:
        raise UsageError(f"{root} has no train split (expected {root}/train/labels.tsv)")
    return data


def _check_shape(model: ModelConfig, data) -> None:
    v = data["train"].mri.shape[1:]
    if v != (model.volume_size,) * 3:
        raise ConfigError(f"volume_size {model.volume_size} does not match data volumes {v}")


def cmd_pretrain(args) -> int:
    from .trainer import MetricsLog, PretrainSession, load_checkpoint

    model_cfg, train_cfg = resolve_config(args.config)
    stage = f"pretrain{args.stage}"
    train_cfg = dataclasses.replace(train_cfg, stage=stage).validate()
    if args.stage == 2 and not args.resume:
        raise UsageError("stage-2 requires stage-1 checkpoint (pass --resume)")
    ckpt = load_checkpoint(_require(args.resume, "checkpoint")) if args.resume else None
    if args.stage == 2 and ckpt.stage not in ("pretrain1", "pretrain2"):
        raise UsageError(f"stage-2 requires stage-1 checkpoint, got a {ckpt.stage} checkpoint")
    if ckpt is not None:
        model_cfg = ckpt.model_config
    data = _load_data(args.data)
    _check_shape(model_cfg, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunManifest(f"pretrain --stage {args.stage}", sys.argv[1:], _config_dict(model_cfg, train_cfg),
                      train_cfg.seed)
    log_path = out / f"stage{args.stage}_metrics.tsv"
    if ckpt is None or ckpt.stage != stage:
        log_path.write_text("", encoding="utf-8")
    session = PretrainSession(model_cfg, train_cfg, ckpt)
    result = session.run(data["train"], MetricsLog(log_path))
    from .trainer import save_checkpoint
    ckpt_path = out / f"stage{args.stage}.ckpt"
    save_checkpoint(result, ckpt_path)
    run.output("checkpoint", ckpt_path)
    run.output("metrics", log_path)
    run.write(out)
    last = result.history[-1] if result.history else {}
    print("\t".join(f"{k}={v:.6f}" for k, v in last.items()))
    print(f"checkpoint\t{ckpt_path}")
    return EXIT_OK


def _report(report) -> None:
    print(report.to_tsv())
    print(report.result_line())


def cmd_finetune(args) -> int:
    from .trainer import load_checkpoint, run_finetune, save_checkpoint

    model_cfg, train_cfg = resolve_config(args.config)
    train_cfg = dataclasses.replace(train_cfg, stage="finetune").validate()
    ckpt = None
    if not args.scratch:
        if not args.ckpt:
            raise UsageError("finetune needs --ckpt (or --scratch)")
        ckpt = load_checkpoint(_require(args.ckpt, "checkpoint"))
        model_cfg = ckpt.model_config
    data = _load_data(args.data)
    for name in ("val", "test"):
        if name not in data:
            raise UsageError(f"{args.data} has no {name} split")
    _check_shape(model_cfg, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunManifest("finetune", sys.argv[1:], _config_dict(model_cfg, train_cfg), train_cfg.seed)
    log_path = out / "finetune_metrics.tsv"
    log_path.write_text("", encoding="utf-8")
    result = run_finetune(model_cfg, train_cfg, data["train"], data["val"], data["test"], ckpt, log_path)
    ckpt_path = out / "finetune.ckpt"
    save_checkpoint(result.checkpoint, ckpt_path)
    run.output("checkpoint", ckpt_path)
    run.output("metrics", log_path)
    run.write(out)
    _report(result.report)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .model import CMViM
    from .trainer import evaluate, load_checkpoint, model_from_checkpoint

    model_cfg, train_cfg = resolve_config(args.config)
    if args.scratch:
        model = CMViM(model_cfg, seed=train_cfg.seed)
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt (or --scratch)")
        model = model_from_checkpoint(load_checkpoint(_require(args.ckpt, "checkpoint")))
    data = read_dataset(_require(args.data, "data directory"))
    if args.split not in data:
        raise UsageError(f"{args.data} has no {args.split} split")
    _check_shape(model.cfg, {"train": data[args.split]})
    _report(evaluate(model, data[args.split]))
    return EXIT_OK


def cmd_params(args) -> int:
    from .model import CMViM, count_parameters, parameter_breakdown

    model_cfg, _ = resolve_config(args.config)
    model = CMViM(model_cfg, seed=0)
    for group, n in parameter_breakdown(model).items():
        print(f"{group}\t{n}")
    print(f"total\t{count_parameters(model)}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import SUITES, run_all

    names = args.suite or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    return EXIT_OK if run_all(names) else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 already; keep its message format
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cmvim", description="Contrastive masked Vim autoencoder on paired 3D volumes.")
    p.add_argument("--version", action="version", version=f"cmvim {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic paired dataset")
    g.add_argument("--spec", help="key = value generator spec (default: built-in toy spec)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int, help="override the number of samples")
    g.add_argument("--train-frac", type=float, default=0.70)
    g.add_argument("--val-frac", type=float, default=0.10)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("pretrain", help="masked + contrastive pretraining (stage 1 or 2)")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--resume", help="checkpoint to continue from; required for stage 2")
    t.add_argument("--out", default="out")
    t.set_defaults(func=cmd_pretrain)

    for name, func in (("finetune", cmd_finetune), ("eval", cmd_eval)):
        f = sub.add_parser(name, help=f"{name} the classifier")
        f.add_argument("--config", required=True)
        f.add_argument("--data", required=True)
        f.add_argument("--ckpt")
        f.add_argument("--scratch", action="store_true", help="ignore any checkpoint; start from random weights")
        if name == "finetune":
            f.add_argument("--out", default="out")
        else:
            f.add_argument("--split", default="test", choices=SPLITS)
        f.set_defaults(func=func)

    c = sub.add_parser("params", help="print parameter counts for a config")
    c.add_argument("--config", required=True)
    c.set_defaults(func=cmd_params)

    s = sub.add_parser("selftest", help="run the oracle suites")
    s.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    from .trainer import CheckpointError, TrainingError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cmvim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, CheckpointError, VolumeFormatError, OSError, FloatingPointError) as exc:
        print(f"cmvim: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
