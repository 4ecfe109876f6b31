"""Command-line entry points: train, eval, ensemble, bench.

Flag spellings follow the historical training script, so published command
lines keep working, including --use_gpu (accepted and ignored; everything here
runs on CPU). A key=value config file can stand in for flags; flags given on
the command line always win.
"""

from __future__ import annotations

import argparse
import sys
from functools import partial

from .adapters import AdapterConfig
from .bench import (desk_grid, desk_runner, emit_report, expand_grid, normalize,
                    paper_grid, run_grid)
from .data import Vocab, desk_data, load_tsv, make_loaders
from .encoder import desk_config
from .ensemble import load_ensemble
from .heads import ModelConfig
from .train import TrainConfig, evaluate, fit, format_score, load_checkpoint

TASKS = ("sst", "para", "sts")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n_per_task", type=int, default=256,
                   help="synthetic examples per task")
    p.add_argument("--data_seed", type=int, default=0)
    p.add_argument("--batch_size", type=int, default=32)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; explicit flags win")
    p.add_argument("--fine-tune-mode", dest="fine_tune_mode", default="full-model",
                   choices=["last-layer", "full-model", "iterative"])
    p.add_argument("--optim", default="adamax",
                   help="sgd, adam, or adamax (anything else fails at build time)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr_lambda", type=float, default=None,
                   help="per-epoch multiplicative lr decay")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--amp", action="store_true")
    p.add_argument("--use_gpu", action="store_true",
                   help="accepted for compatibility; ignored")
    p.add_argument("--clf", default="linear", choices=["linear", "nonlinear", "conv"])
    p.add_argument("--architecture", default="yin-yang",
                   choices=["yin-yang", "duality-of-man"])
    p.add_argument("--schedule", default="sequential",
                   choices=["sequential", "interleaved"])
    p.add_argument("--lora_mode", default=None,
                   choices=["none", "attn-only", "attn", "all-lin-only", "all-lin"])
    p.add_argument("--lora_rank", type=int, default=None)
    p.add_argument("--use_dora", action="store_true")
    for task in ("sst", "quora", "sts"):
        p.add_argument(f"--train_{task}", action="store_true",
                       help="enable this task (default: all tasks)")
        p.add_argument(f"--num_{task}_trains", type=int, default=1)
    for task in TASKS:
        p.add_argument(f"--{task}_lr_multiplier", type=float, default=None)
        p.add_argument(f"--{task}_weight_decay", type=float, default=None)
    p.add_argument("--quora_start_epoch", type=int, default=0)
    p.add_argument("--use_ema", action="store_true")
    p.add_argument("--ema_decay", type=float, default=0.999)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save", default=None, help="checkpoint output path")
    _add_data_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptbench")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="fit the multitask model on synthetic data")
    _add_train_flags(train)

    ev = sub.add_parser("eval", help="score a checkpoint on a dev set")
    ev.add_argument("--checkpoint", required=True)
    for task in TASKS:
        ev.add_argument(f"--{task}_path", default=None,
                        help=f"TSV file for the {task} dev set")
    _add_data_flags(ev)

    ens = sub.add_parser("ensemble", help="average predictions over checkpoints")
    ens.add_argument("--filepaths", nargs="+", default=None)
    ens.add_argument("paths", nargs="*", default=[])
    _add_data_flags(ens)

    bench = sub.add_parser("bench", help="run an efficiency sweep, write CSV")
    bench.add_argument("--grid", default="default-desk",
                       choices=["default-desk", "paper"])
    bench.add_argument("--out", default="bench_report.csv")
    bench.add_argument("--parallelism", type=int, default=1)
    bench.add_argument("--limit", type=int, default=0,
                       help="run only the first N feasible configs (0 = all)")
    bench.add_argument("--seed", type=int, default=0)
    _add_data_flags(bench)
    return parser


# ---------------------------------------------------------------------------
# config file
# ---------------------------------------------------------------------------

def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes", "on")
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def apply_config_file(args: argparse.Namespace, argv: list[str]) -> None:
    given = {tok.split("=", 1)[0] for tok in argv if tok.startswith("--")}
    with open(args.config) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ValueError(f"{args.config}:{lineno}: expected key=value, got {line!r}")
            dest = key.replace("-", "_")
            if not hasattr(args, dest):
                raise ValueError(f"{args.config}:{lineno}: unknown config key {key!r}")
            if {f"--{key}", f"--{dest}", f"--{dest.replace('_', '-')}"} & given:
                continue
            setattr(args, dest, _coerce(value, getattr(args, dest)))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _train_config(args, parser: argparse.ArgumentParser) -> TrainConfig:
    if args.lora_rank is not None and args.lora_mode in (None, "none"):
        parser.error("--lora_rank requires --lora_mode")
    if args.use_dora and args.lora_mode in (None, "none"):
        parser.error("--use_dora requires --lora_mode")
    adapter = AdapterConfig(mode=args.lora_mode or "none",
                            rank=args.lora_rank or 1, use_dora=args.use_dora)
    model = ModelConfig(encoder=desk_config(), architecture=args.architecture,
                        clf=args.clf, seed=args.seed)
    any_task = args.train_sst or args.train_quora or args.train_sts
    multipliers = {t: getattr(args, f"{t}_lr_multiplier") for t in TASKS
                   if getattr(args, f"{t}_lr_multiplier") is not None}
    decays = {t: getattr(args, f"{t}_weight_decay") for t in TASKS
              if getattr(args, f"{t}_weight_decay") is not None}
    return TrainConfig(
        model=model, adapter=adapter, fine_tune_mode=args.fine_tune_mode,
        epochs=args.epochs, batch_size=args.batch_size, amp=args.amp,
        schedule=args.schedule,
        train_sst=args.train_sst or not any_task,
        train_para=args.train_quora or not any_task,
        train_sts=args.train_sts or not any_task,
        num_sst_trains=args.num_sst_trains, num_quora_trains=args.num_quora_trains,
        num_sts_trains=args.num_sts_trains, quora_start_epoch=args.quora_start_epoch,
        optim_kind=args.optim.lower(), lr=args.lr, lr_lambda=args.lr_lambda,
        lr_multipliers=multipliers, weight_decays=decays,
        use_ema=args.use_ema, ema_decay=args.ema_decay, seed=args.seed)


def _print_scores(scores: dict) -> None:
    for key in ("sst_acc", "para_acc", "sts_pearson", "overall"):
        print(f"{key}: {format_score(scores[key])}")


def cmd_train(args, parser) -> int:
    if args.use_gpu:
        print("note: --use_gpu is ignored; training runs on CPU")
    cfg = _train_config(args, parser)
    loaders, _ = desk_data(seed=args.data_seed, n_per_task=args.n_per_task,
                           batch_size=args.batch_size)
    _, metrics = fit(cfg, loaders["train"], loaders["dev"],
                     checkpoint_path=args.save, verbose=True)
    print(f"best overall {format_score(metrics.best_score)} "
          f"at epoch {metrics.best_epoch}")
    return 0


def _dev_loaders(args) -> dict:
    tsv_paths = {t: getattr(args, f"{t}_path", None) for t in TASKS}
    if any(tsv_paths.values()):
        missing = [t for t, p in tsv_paths.items() if p is None]
        if missing:
            raise ValueError(f"TSV evaluation needs all three dev files; missing {missing}")
        datasets = {"dev": {t: load_tsv(p, t) for t, p in tsv_paths.items()}}
        return make_loaders(datasets, Vocab(), args.batch_size)["dev"]
    loaders, _ = desk_data(seed=args.data_seed, n_per_task=args.n_per_task,
                           batch_size=args.batch_size)
    return loaders["dev"]


def cmd_eval(args, parser) -> int:
    model, header = load_checkpoint(args.checkpoint)
    print(f"loaded {args.checkpoint} (saved dev score "
          f"{format_score(header['best_score'])})")
    _print_scores(evaluate(model, _dev_loaders(args)))
    return 0


def cmd_ensemble(args, parser) -> int:
    paths = args.filepaths or args.paths
    if not paths:
        parser.error("ensemble needs checkpoint paths (--filepaths p1 p2 ...)")
    ens = load_ensemble(paths)
    print(f"{len(ens.members)} members loaded")
    _print_scores(evaluate(ens, _dev_loaders(args)))
    return 0


def cmd_bench(args, parser) -> int:
    grid = desk_grid() if args.grid == "default-desk" else paper_grid()
    configs = expand_grid(grid)
    if args.limit:
        configs = configs[: args.limit]
    print(f"running {len(configs)} feasible configs")
    runner = partial(desk_runner, n_per_task=args.n_per_task,
                     data_seed=args.data_seed, seed=args.seed)
    table = run_grid(configs, args.parallelism, runner)
    baseline = next((rc.config_id for rc in configs if rc.lora_mode == "none"),
                    configs[0].config_id)
    table = normalize(table, baseline)
    summary = emit_report(table, args.out)
    print(f"wrote {args.out} (normalized to {baseline})")
    print(summary)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval,
            "ensemble": cmd_ensemble, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "config", None):
            apply_config_file(args, argv)
        return COMMANDS[args.command](args, parser)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
