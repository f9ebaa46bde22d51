"""Command-line entry point: ``mbgmn {train,evaluate,synth,ablate,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import DataError, generate_synthetic, write_id_maps, write_interactions
from .pipeline import (
    ConfigFileError,
    ablation_table,
    build_run_config,
    evaluate_checkpoint,
    read_config_file,
    run_ablation,
    train_and_evaluate,
    write_report,
)
from .trainer import CheckpointError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


RUN_FLAGS = [
    ("--data", str, "interaction TSV (user, item, behavior[, unix-seconds])"),
    ("--behaviors", str, "comma-separated behavior names, in declaration order"),
    ("--target-behavior", str, "name of the target behavior"),
    ("--users", int, "synthetic: number of users"),
    ("--items", int, "synthetic: number of items"),
    ("--density", float, "synthetic: events per behavior as a fraction of I*J"),
    ("--rho", float, "synthetic: cross-behavior correlation in [0, 1]"),
    ("--epochs", int, None),
    ("--seed", int, None),
    ("--layers", int, None),
    ("--dim", int, None),
    ("--low-rank-dim", int, None),
    ("--heads", int, None),
    ("--lambda", float, "weight-decay coefficient"),
    ("--lr", float, None),
    ("--batch-size", int, "users per batch"),
    ("--samples-per-user", int, "positive/negative pairs per user and behavior"),
    ("--ablate", str, "comma-separated flags from lowR,mFeat,mTask,metaC,metaP"),
    ("--drop-behaviors", str, "comma-separated context behaviors to drop"),
    ("--cutoffs", str, "comma-separated top-N cutoffs"),
    ("--out", str, "output directory"),
]


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file; flags override it")
    for flag, typ, help_ in RUN_FLAGS:
        kw = {"type": typ, "default": None, "help": help_}
        if flag == "--target-behavior":
            p.add_argument(flag, "--target", dest="target_behavior", **kw)
        elif flag == "--lambda":
            p.add_argument(flag, dest="lambda_", **kw)
        else:
            p.add_argument(flag, **kw)
    p.add_argument("--target-only", action="store_true", default=None, help="keep only the target behavior")
    p.add_argument("--off-grid", action="store_true", default=None, help="allow values outside the search grids")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mbgmn", description="Multi-behavior graph meta network: train, evaluate, ablate.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train, checkpoint and evaluate")
    _add_run_flags(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint written by train")
    p.add_argument("--checkpoint", help="checkpoint file (default: <out>/model.ckpt)")
    p.add_argument("--out", help="directory holding model.ckpt; the report is written next to it")

    p = sub.add_parser("synth", help="write a synthetic interaction TSV")
    _add_run_flags(p)

    p = sub.add_parser("ablate", help="train every ablation variant and compare")
    _add_run_flags(p)
    p.add_argument("--variants", help="comma-separated subset of variant names")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--coords", type=int, default=None, help="check at most this many coordinates per parameter")
    return parser


def _settings(args) -> dict:
    settings: dict = {}
    if args.config:
        settings.update(read_config_file(args.config))
    flags = {
        "data": args.data,
        "behaviors": args.behaviors,
        "target-behavior": args.target_behavior,
        "users": args.users,
        "items": args.items,
        "density": args.density,
        "rho": args.rho,
        "epochs": args.epochs,
        "seed": args.seed,
        "layers": args.layers,
        "dim": args.dim,
        "low-rank-dim": args.low_rank_dim,
        "heads": args.heads,
        "lambda": args.lambda_,
        "lr": args.lr,
        "batch-size": args.batch_size,
        "samples-per-user": args.samples_per_user,
        "ablate": args.ablate,
        "drop-behaviors": args.drop_behaviors,
        "cutoffs": args.cutoffs,
        "out": args.out,
        "target-only": args.target_only,
        "off-grid": args.off_grid,
    }
    settings.update({k: v for k, v in flags.items() if v is not None})
    return settings


def cmd_train(args) -> int:
    run = build_run_config(_settings(args))
    if not run.out:
        raise UsageError("train needs --out")
    res = train_and_evaluate(run)
    write_id_maps(res.data, run.out)
    print(res.report.to_text())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.checkpoint:
        path = Path(args.checkpoint)
    elif args.out:
        path = Path(args.out) / "model.ckpt"
    else:
        raise UsageError("evaluate needs --checkpoint or --out")
    run, report = evaluate_checkpoint(path)
    write_report(report, path.parent / "evaluate_report")
    print(report.to_text())
    return EXIT_OK


def cmd_synth(args) -> int:
    settings = _settings(args)
    settings.setdefault("seed", 7)
    run = build_run_config(settings)
    t = generate_synthetic(
        run.users, run.items, len(run.behaviors), run.density, run.rho, run.seed, run.behaviors, run.target
    )
    if run.out:
        Path(run.out).mkdir(parents=True, exist_ok=True)
        path = Path(run.out) / "interactions.tsv"
        write_interactions(t, path)
        print(f"wrote {t.num_events} events to {path}", file=sys.stderr)
    else:
        users = [f"u{i}" for i in range(t.num_users)]
        items = [f"i{j}" for j in range(t.num_items)]
        for u, i, k in zip(t.users, t.items, t.kinds):
            sys.stdout.write(f"{users[u]}\t{items[i]}\t{t.behaviors[k]}\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = build_run_config(_settings(args))
    names = [v.strip() for v in args.variants.split(",")] if args.variants else None
    rows = run_ablation(run, names=names)
    cutoff = max(run.cutoffs)
    table = ablation_table(rows, cutoff)
    if run.out:
        out = Path(run.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "ablation.jsonl").open("w") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(seed=args.seed, max_coords=args.coords)
    print(report)
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
