"""Command-line experiment runner.

Every command resolves a config (defaults < YAML file < flags), writes its
artifacts under the output directory and appends itself to
``<output>/manifest.json`` so the run can be replayed with ``rerun``.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .channel import QuantizerSpec, snr_to_sigma
from .channel.digital import debug_table
from .config import ExperimentConfig, dump_config, from_dict, load_config
from .data import save_archive
from .errors import CheckpointError, ConfigError, DataError, NumericError, ShapeError
from .evalkit import confusion_matrix, cr_sweep, plot_confusion, snr_grid, snr_sweep, write_confusion_csv
from .experiment import DTYPES, PipelineEvaluator, load_domains, run_step1, run_step2
from .model import load_checkpoint, save_checkpoint
from .trainer import evaluate, predict, write_metrics_csv

log = logging.getLogger("edgeadapt")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5

METHOD_TAGS = {"test-d": "Test-d", "dasein-s1": "DASEIN-S1", "dasein": "DASEIN"}


def _layout(cfg: ExperimentConfig) -> dict[str, Path]:
    root = Path(cfg.output)
    dirs = {name: root / name for name in ("checkpoints", "metrics", "plots")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    dirs["root"] = root
    return dirs


def _record(cfg: ExperimentConfig, command: str, args: dict) -> None:
    path = Path(cfg.output) / "manifest.json"
    manifest = {"build": _build_info(), "runs": []}
    if path.exists():
        manifest = json.loads(path.read_text())
    manifest["build"] = _build_info()
    manifest["runs"].append({"command": command, "args": args, "seed": cfg.seed, "config": cfg.to_dict()})
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _build_info() -> dict:
    return {
        "edgeadapt": __version__,
        "torch": torch.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def _overrides(args: argparse.Namespace) -> dict:
    over = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        over[key.strip()] = value.strip()
    flag_map = {
        "seed": "seed",
        "output": "output",
        "lam": "train.lam",
        "epochs": "train.epochs",
        "finetune_epochs": "train.finetune_epochs",
        "source_snr": "channel.snr_source",
        "target_snr": "channel.snr_target",
        "mode": "channel.mode",
        "qb": "channel.q_b",
        "cr": "model.cr",
        "archive": "data.archive",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            over[key] = value
    return over


def _config(args) -> ExperimentConfig:
    return load_config(args.config, _overrides(args))


# -- commands --------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    if not cfg.uses_synthetic:
        raise ConfigError("synth needs a synthetic data section (no archive or directories)")
    dirs = _layout(cfg)
    source, target, meta = load_domains(cfg)
    path = Path(args.out) if args.out else dirs["root"] / "data" / "synthetic.npz"
    save_archive(path, source, target, meta)
    print(f"wrote {path} ({len(source)} source / {len(target)} target samples)")
    return EXIT_OK


def cmd_train_uda(cfg: ExperimentConfig, args) -> int:
    dirs = _layout(cfg)
    source, target, _ = load_domains(cfg)
    result = run_step1(cfg, source, target)
    name = args.name or "step1"
    write_metrics_csv(result.history, dirs["metrics"] / f"{name}.csv")
    save_checkpoint(result.model, dirs["checkpoints"] / f"{name}.pt", cfg.seed, {"phase": "step1", "lam": cfg.train.lam})
    last = result.history[-1]
    print(f"{name}: loss {last['loss']:.4f} source acc {last['source_acc']} target acc {last['target_acc']}")
    return EXIT_OK


def _load(cfg: ExperimentConfig, path, num_classes: int):
    model, meta = load_checkpoint(path, expect=cfg.model_config(num_classes))
    return model.to(DTYPES[cfg.model.dtype]), meta


def cmd_finetune_kd(cfg: ExperimentConfig, args) -> int:
    dirs = _layout(cfg)
    source, target, _ = load_domains(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else dirs["checkpoints"] / "step1.pt"
    adapted, _ = _load(cfg, ckpt, source.class_count)
    result = run_step2(cfg, source, target, adapted)
    name = args.name or "step2"
    write_metrics_csv(result.history, dirs["metrics"] / f"{name}.csv")
    save_checkpoint(result.model, dirs["checkpoints"] / f"{name}.pt", cfg.seed,
                    {"phase": "step2", "target_snr": cfg.channel.snr_target})
    if result.history:
        last = result.history[-1]
        print(f"{name}: loss {last['loss']:.4f} target acc {last['target_acc']}")
    else:
        print(f"{name}: no fine-tuning epochs, copied {ckpt}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    dirs = _layout(cfg)
    source, target, meta = load_domains(cfg)
    default = {"test-d": "source.pt", "dasein-s1": "step1.pt", "dasein": "step2.pt"}[args.method]
    ckpt = Path(args.checkpoint) if args.checkpoint else dirs["checkpoints"] / default
    model, _ = _load(cfg, ckpt, source.class_count)
    channel = cfg.target_channel()
    tag = METHOD_TAGS[args.method]
    mean, std = evaluate(model, target, channel, cfg.seed, cfg.train.eval_draws)
    preds = predict(model, target, channel, cfg.seed)
    cm = confusion_matrix(preds, target.truth, target.class_count)
    names = meta.get("class_names")
    write_confusion_csv(cm, dirs["metrics"] / f"confusion_{args.method}.csv", names)
    out = dirs["metrics"] / f"eval_{args.method}.csv"
    out.write_text(
        "method,snr_db,accuracy_mean,accuracy_std\n"
        f"{tag},{cfg.channel.snr_target!r},{mean!r},{std!r}\n"
    )
    if args.plot:
        plot_confusion(cm, dirs["plots"] / f"confusion_{args.method}.png", names)
    print(f"{tag} @ {cfg.channel.snr_target} dB: accuracy {100 * mean:.2f} +- {100 * std:.2f} %")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    dirs = _layout(cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    methods = [METHOD_TAGS[m.strip().lower()] for m in args.methods.split(",")]
    evaluator = PipelineEvaluator(cfg, args.axis, tuple(methods))
    if args.values:
        points = [float(v) for v in args.values.split(",")]
    elif args.axis == "snr":
        points = snr_grid(args.start, args.stop, args.step)
    else:
        raise ConfigError("cr sweeps need --values")
    sweep = snr_sweep if args.axis == "snr" else cr_sweep
    result = sweep(evaluator, points, seeds, jobs=args.jobs)
    path = result.write_csv(dirs["metrics"])
    if args.plot:
        result.plot(dirs["plots"] / f"sweep_{result.name}.png")
    for method, rows in result.summary().items():
        line = "  ".join(f"{a:g}:{100 * m:.1f}" for a, m, _ in rows)
        print(f"{method:10s} {line}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_digital_debug(args) -> int:
    spec = QuantizerSpec(q_b=args.qb, z_min=args.z_min, z_max=args.z_max, r=args.r)
    sigma = 0.0 if args.snr is None else snr_to_sigma(args.snr)
    rows = debug_table(torch.tensor(args.value, dtype=torch.float64), spec, sigma, args.seed)
    cols = list(rows[0])
    widths = {c: max(len(c), *(len(r[c]) for r in rows)) for c in cols}
    print("  ".join(c.ljust(widths[c]) for c in cols))
    for r in rows:
        print("  ".join(r[c].ljust(widths[c]) for c in cols))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train-uda": cmd_train_uda,
    "finetune-kd": cmd_finetune_kd,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def cmd_rerun(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    for run in manifest["runs"]:
        cfg = from_dict(run["config"])
        if args.output:
            cfg.output = args.output
        cfg.validate()
        ns = argparse.Namespace(**run["args"])
        log.info("replaying %s", run["command"])
        code = _dispatch(run["command"], cfg, ns)
        if code != EXIT_OK:
            return code
    return EXIT_OK


def _dispatch(command: str, cfg: ExperimentConfig, args) -> int:
    torch.use_deterministic_algorithms(True)
    code = COMMANDS[command](cfg, args)
    _record(cfg, command, {k: v for k, v in vars(args).items() if k in _COMMAND_ARGS.get(command, ())})
    return code


# command-specific arguments kept in the manifest for replay
_COMMAND_ARGS = {
    "synth": ("out",),
    "train-uda": ("name",),
    "finetune-kd": ("checkpoint", "name"),
    "eval": ("checkpoint", "method", "plot"),
    "sweep": ("axis", "start", "stop", "step", "values", "seeds", "methods", "jobs", "plot"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeadapt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.epochs=5")
        p.add_argument("--seed", type=int)
        p.add_argument("--output")
        p.add_argument("--lambda", dest="lam", type=float, help="step-1 adaptation weight")
        p.add_argument("--epochs", type=int)
        p.add_argument("--finetune-epochs", type=int)
        p.add_argument("--source-snr", type=float)
        p.add_argument("--target-snr", type=float)
        p.add_argument("--mode", choices=("analog", "digital"))
        p.add_argument("--qb", type=int)
        p.add_argument("--cr", type=float)
        p.add_argument("--archive", help="dataset archive written by synth")
        return p

    p = with_config(sub.add_parser("synth", help="generate the synthetic shift task"))
    p.add_argument("--out", help="archive path (default <output>/data/synthetic.npz)")

    p = with_config(sub.add_parser("train-uda", help="step 1: supervised + LMMD adaptation"))
    p.add_argument("--name", help="artifact name (default step1)")

    p = with_config(sub.add_parser("finetune-kd", help="step 2: distillation to the target SNR"))
    p.add_argument("--checkpoint", help="step-1 checkpoint (default <output>/checkpoints/step1.pt)")
    p.add_argument("--name", help="artifact name (default step2)")

    p = with_config(sub.add_parser("eval", help="score a checkpoint on the target domain"))
    p.add_argument("--method", choices=sorted(METHOD_TAGS), required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--plot", action="store_true")

    p = with_config(sub.add_parser("sweep", help="accuracy against SNR or compression rate"))
    p.add_argument("--axis", choices=("snr", "cr"), default="snr")
    p.add_argument("--from", dest="start", type=float, default=-20.0)
    p.add_argument("--to", dest="stop", type=float, default=5.0)
    p.add_argument("--step", type=float, default=5.0)
    p.add_argument("--values", help="comma-separated axis points (required for cr)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--methods", default="dasein,dasein-s1,test-d")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--plot", action="store_true")

    p = sub.add_parser("digital-debug", help="dump the digital chain for given values")
    p.add_argument("--value", type=float, nargs="+", required=True)
    p.add_argument("--qb", type=int, default=2)
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--z-min", type=float, default=-1.0)
    p.add_argument("--z-max", type=float, default=1.0)
    p.add_argument("--snr", type=float, help="channel SNR in dB (default: noiseless)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("rerun", help="replay every run recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--output", help="write into this directory instead")

    p = with_config(sub.add_parser("show-config", help="print the resolved config"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "digital-debug":
            return cmd_digital_debug(args)
        if args.command == "rerun":
            return cmd_rerun(args)
        cfg = _config(args)
        if args.command == "show-config":
            print(dump_config(cfg), end="")
            return EXIT_OK
        return _dispatch(args.command, cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
