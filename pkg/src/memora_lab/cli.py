"""Command-line entry point.

Verbs: train-base, unlearn, relearn, attack, eval, report.  The artifact
root comes from --out, else the MEMORA_LAB_HOME environment variable, else
./runs.  Commands run single-threaded by default so reruns under one master
seed are bit-exact.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import torch

from .config import RunConfig, default_config, load_config
from . import harness

DEFAULT_ROOT = "runs"


def _resolve_out(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get("MEMORA_LAB_HOME")
    return Path(env) if env else Path(DEFAULT_ROOT)


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.run.master_seed = args.seed
    return cfg


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="INI config file (defaults shipped in-code)")
    parser.add_argument("--seed", type=int, metavar="N", help="override the master seed")
    parser.add_argument("--out", metavar="DIR", help="artifact root (or $MEMORA_LAB_HOME, or ./runs)")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memora-lab",
        description="Unlearn and relearn concepts in a toy diffusion model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="generate the world, train classifier and base model")
    _add_common(p)

    p = sub.add_parser("unlearn", help="produce an unlearned model checkpoint")
    _add_common(p)
    p.add_argument("--method", required=True,
                   choices=["negative_guidance", "retrain_excluding"])
    p.add_argument("--concept", type=int, help="concept id to erase (default from config)")
    p.add_argument("--model", help="source model checkpoint (default: base model)")
    p.add_argument("--name", help="output checkpoint name (without .npz)")

    p = sub.add_parser("relearn", help="run the recovery pipeline against an unlearned model")
    _add_common(p)
    p.add_argument("--model", required=True, help="unlearned model checkpoint")
    p.add_argument("--refs", help="reference-image archive (default: drawn from the dataset)")

    p = sub.add_parser("attack", help="adversarial condition attack on a model")
    _add_common(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--concept", type=int, help="target concept id (default from config)")
    p.add_argument("--adapter", help="adapter checkpoint to attach")
    p.add_argument("--seeds", type=int, help="number of attack seeds (default eval.n_prompts)")

    p = sub.add_parser("eval", help="evaluate a model; write CSV/JSON report")
    _add_common(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--adapter", help="adapter checkpoint to attach")
    p.add_argument("--concept", type=int, help="evaluated concept id (default from config)")
    p.add_argument("--automemora", type=float, metavar="W",
                   help="also report blend-guided metrics at weight W")
    p.add_argument("--beta", type=float, metavar="B", help="adapter scale override")
    p.add_argument("--jobs", type=int, default=1, metavar="N",
                   help="parallel lanes for eval generation seeds")

    p = sub.add_parser("report", help="tables and plots for a run directory")
    _add_common(p)
    p.add_argument("run_dir", nargs="?", help="run directory (default: --out)")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    cfg = _resolve_config(args)
    out = _resolve_out(args.out)

    try:
        if args.command == "train-base":
            harness.cmd_train_base(cfg, out, force=args.force)
        elif args.command == "unlearn":
            harness.cmd_unlearn(cfg, out, args.method, concept=args.concept,
                                model_path=args.model, name=args.name, force=args.force)
        elif args.command == "relearn":
            harness.cmd_relearn(cfg, out, Path(args.model), refs_path=args.refs,
                                force=args.force)
        elif args.command == "attack":
            harness.cmd_attack(cfg, out, Path(args.model), concept=args.concept,
                               adapter_path=args.adapter, n_seeds=args.seeds,
                               force=args.force)
        elif args.command == "eval":
            harness.cmd_eval(cfg, out, Path(args.model), adapter_path=args.adapter,
                             automemora_w=args.automemora, beta_override=args.beta,
                             concept=args.concept, jobs=args.jobs, force=args.force)
        elif args.command == "report":
            harness.cmd_report(cfg, out, run_dir=args.run_dir)
    except (FileExistsError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
