"""Run configuration and the end-to-end train/evaluate/ablate pipeline."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from .data import (
    DataError,
    InteractionTensor,
    SplitDataset,
    build_graphs,
    generate_synthetic,
    leave_one_out_split,
    load_interactions,
)
from .evaluate import DEFAULT_CUTOFFS, EvalReport, dependency_report, evaluate, model_scorer, popularity_baseline
from .trainer import TrainConfig, TrainState, fit, prepare, restore

log = logging.getLogger(__name__)


class ConfigFileError(ValueError):
    pass


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigFileError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("_", "-")] = value.strip()
    return out


def _split_list(value) -> tuple[str, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return tuple(v.strip() for v in str(value).split(",") if v.strip())


@dataclass(frozen=True)
class RunConfig:
    """Where the data comes from, how to train, and where outputs go.

    ``data`` is a TSV path; when it is ``None`` a synthetic tensor is generated
    from the ``users``/``items``/``density``/``rho`` fields.
    """

    train: TrainConfig
    data: str | None = None
    behaviors: tuple[str, ...] = ("view", "cart", "buy")
    target: str = "buy"
    users: int = 500
    items: int = 200
    density: float = 0.02
    rho: float = 0.8
    cutoffs: tuple[int, ...] = DEFAULT_CUTOFFS
    out: str | None = None

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        d["behaviors"] = list(self.behaviors)
        d["cutoffs"] = list(self.cutoffs)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["train"] = TrainConfig.from_dict(d["train"])
        d["behaviors"] = tuple(d["behaviors"])
        d["cutoffs"] = tuple(d["cutoffs"])
        return cls(**d)

    def with_train(self, **changes) -> "RunConfig":
        return replace(self, train=replace(self.train, **changes))


# option name -> (RunConfig field or "train.<field>", parser)
OPTIONS = {
    "data": ("data", str),
    "behaviors": ("behaviors", _split_list),
    "target-behavior": ("target", str),
    "users": ("users", int),
    "items": ("items", int),
    "density": ("density", float),
    "rho": ("rho", float),
    "cutoffs": ("cutoffs", lambda v: tuple(int(x) for x in _split_list(v))),
    "out": ("out", str),
    "seed": ("train.seed", int),
    "epochs": ("train.epochs", int),
    "layers": ("train.layers", int),
    "dim": ("train.dim", int),
    "low-rank-dim": ("train.low_rank_dim", int),
    "heads": ("train.heads", int),
    "lambda": ("train.weight_decay", float),
    "lr": ("train.lr", float),
    "lr-decay": ("train.lr_decay", float),
    "batch-size": ("train.batch_size", int),
    "samples-per-user": ("train.samples_per_user", int),
    "ablate": ("train.ablate", _split_list),
    "drop-behaviors": ("train.drop_behaviors", _split_list),
    "target-only": ("train.target_only", lambda v: str(v).lower() in ("1", "true", "yes", "on")),
    "off-grid": ("train.off_grid", lambda v: str(v).lower() in ("1", "true", "yes", "on")),
}


def build_run_config(settings: dict[str, object]) -> RunConfig:
    """Turn merged key/value settings (file first, CLI overriding) into a RunConfig."""
    run_kw: dict = {}
    train_kw: dict = {}
    for key, value in settings.items():
        if value is None:
            continue
        key = key.replace("_", "-")
        if key == "target":
            key = "target-behavior"
        if key not in OPTIONS:
            raise ConfigFileError(f"unknown setting {key!r}")
        dest, parse = OPTIONS[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigFileError(f"bad value for {key}: {value!r} ({exc})") from None
        if dest.startswith("train."):
            train_kw[dest[6:]] = parsed
        else:
            run_kw[dest] = parsed
    if "seed" not in train_kw:
        raise ConfigFileError("a seed is required")
    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigFileError(str(exc)) from None
    run = RunConfig(train=train, **run_kw)
    if run.target not in run.behaviors:
        raise ConfigFileError(f"target behavior {run.target!r} not in {run.behaviors}")
    return run


def load_data(run: RunConfig) -> InteractionTensor:
    if run.data:
        return load_interactions(run.data, run.behaviors, run.target)
    return generate_synthetic(
        run.users, run.items, len(run.behaviors), run.density, run.rho, run.seed, run.behaviors, run.target
    )


@dataclass
class RunResult:
    run: RunConfig
    data: InteractionTensor
    split: SplitDataset
    state: TrainState
    report: EvalReport
    dependency: dict = field(default_factory=dict)


def prepare_split(run: RunConfig, data: InteractionTensor | None = None):
    """Split the unmasked data, then apply behavior masks to the training part only.

    Every variant of a run is therefore ranked on the same held-out items and negatives.
    """
    data = load_data(run) if data is None else data
    full = leave_one_out_split(data, run.seed)
    masked, wiring = prepare(full.train, run.train)
    split = replace(full, train=masked)
    return data, masked, wiring, split, build_graphs(split.train)


def train_and_evaluate(run: RunConfig, data: InteractionTensor | None = None, write: bool = True) -> RunResult:
    """Train on the leave-one-out split and evaluate; write artifacts to ``run.out``."""
    from .trainer import checkpoint

    data, masked, wiring, split, graphs = prepare_split(run, data)
    out = Path(run.out) if (write and run.out) else None
    log_path = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "epochs.jsonl"
        log_path.write_text("")
    state = fit(split, graphs, run.train, wiring, log_path=log_path)
    report = evaluate(split, model_scorer(state.model, graphs, split.train.target), run.cutoffs)
    state.best_metric = report.hr[max(run.cutoffs)]
    dep = dependency_report(state.logs, users=run.train.track_users) if state.logs else {}
    if out:
        checkpoint(state, out / "model.ckpt", meta={"run": run.to_dict()})
        write_report(report, out / "report")
        (out / "dependency.json").write_text(json.dumps(dep, sort_keys=True) + "\n")
    return RunResult(run, data, split, state, report, dep)


def evaluate_checkpoint(path, data: InteractionTensor | None = None) -> tuple[RunConfig, EvalReport]:
    """Rebuild the split recorded in a checkpoint and evaluate the stored model."""
    from .trainer import checkpoint_meta

    meta = checkpoint_meta(path)
    if "run" not in meta:
        raise DataError(f"{path}: checkpoint carries no run configuration")
    run = RunConfig.from_dict(meta["run"])
    state = restore(path)
    _, masked, _, split, graphs = prepare_split(run, data)
    report = evaluate(split, model_scorer(state.model, graphs, split.train.target), run.cutoffs)
    return run, report


def write_report(report: EvalReport, stem) -> None:
    stem = Path(stem)
    stem.with_suffix(".json").write_text(report.to_json() + "\n")
    stem.with_suffix(".txt").write_text(report.to_text() + "\n")


def ablation_variants(behaviors: Sequence[str], target: str) -> list[tuple[str, dict]]:
    """The full model, each single ablation flag, each context drop, and target-only."""
    out = [("full", {})]
    for flag in ("lowR", "mFeat", "mTask", "metaC", "metaP"):
        out.append((f"w/o {flag}", {"ablate": (flag,)}))
    for b in behaviors:
        if b != target:
            out.append((f"-{b}", {"drop_behaviors": (b,)}))
    out.append((f"+{target} only", {"target_only": True}))
    return out


def run_ablation(run: RunConfig, data: InteractionTensor | None = None, names: Sequence[str] | None = None) -> list[dict]:
    data = load_data(run) if data is None else data
    rows = []
    pop_split = leave_one_out_split(data, run.seed)
    pop = evaluate(pop_split, popularity_baseline(pop_split), run.cutoffs)
    rows.append({"variant": "popularity", "hr": pop.hr, "ndcg": pop.ndcg})
    for name, changes in ablation_variants(data.behaviors, data.target_name):
        if names is not None and name not in names:
            continue
        variant = run.with_train(**changes)
        res = train_and_evaluate(variant, data, write=False)
        rows.append({"variant": name, "hr": res.report.hr, "ndcg": res.report.ndcg})
        log.info("%s: HR@%d %.4f", name, max(run.cutoffs), res.report.hr[max(run.cutoffs)])
    return rows


def ablation_table(rows: list[dict], cutoff: int = 10) -> str:
    lines = [f"{'variant':<14}{'HR@' + str(cutoff):>10}{'NDCG@' + str(cutoff):>10}"]
    for r in rows:
        lines.append(f"{r['variant']:<14}{r['hr'][cutoff]:10.4f}{r['ndcg'][cutoff]:10.4f}")
    return "\n".join(lines)
