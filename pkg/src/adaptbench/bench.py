"""Efficiency sweep driver.

Expands a parameter grid into the feasible configurations, runs each one
through fit() with isolated state, normalizes metrics against a baseline row,
and emits deterministic CSV reports. Scores in the table are the final-epoch
dev scores; peak memory is the ledger peak averaged over a task's epochs.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from functools import partial

from .adapters import AdapterConfig
from .data import desk_data
from .encoder import desk_config
from .heads import ModelConfig
from .train import TASK_ORDER, RunMetrics, TrainConfig, fit


@dataclass
class GridSpec:
    amp: list
    lr: list
    batch_size: list
    lora_rank: list
    lora_mode: list
    dora: list
    fine_tune_mode: list
    epochs: list

    def __post_init__(self) -> None:
        for f in fields(self):
            if not getattr(self, f.name):
                raise ValueError(f"grid axis {f.name!r} is empty")


def paper_grid() -> GridSpec:
    """The published search space: 960 raw combinations, 416 feasible."""
    return GridSpec(
        amp=[True],
        lr=[1e-4, 5e-5, 1e-5, 5e-6],
        batch_size=[64, 128, 256, 384],
        lora_rank=[1, 5, 10],
        lora_mode=["none", "all-lin", "attn", "all-lin-only", "attn-only"],
        dora=[False, True],
        fine_tune_mode=["full-model", "last-layer"],
        epochs=[3],
    )


def desk_grid(**overrides) -> GridSpec:
    """Same axis structure shrunk to laptop scale."""
    axes = dict(
        amp=[True],
        lr=[2e-3, 1e-3],
        batch_size=[16, 32],
        lora_rank=[1, 5],
        lora_mode=["none", "attn", "all-lin"],
        dora=[False, True],
        fine_tune_mode=["full-model", "last-layer"],
        epochs=[2],
    )
    axes.update(overrides)
    return GridSpec(**axes)


@dataclass(frozen=True)
class RunConfig:
    amp: bool
    lr: float
    batch_size: int
    lora_rank: int
    lora_mode: str
    dora: bool
    fine_tune_mode: str
    epochs: int

    @property
    def config_id(self) -> str:
        parts = ["amp" if self.amp else "fp32", f"lr{self.lr:g}", f"b{self.batch_size}"]
        if self.lora_mode == "none":
            # rank and dora are inert without an adapter; the id elides them
            parts += ["none", self.fine_tune_mode]
        else:
            parts += [self.lora_mode, f"r{self.lora_rank}",
                      "dora" if self.dora else "lora"]
        parts.append(f"e{self.epochs}")
        return "-".join(parts)


def expand_grid(spec: GridSpec) -> list[RunConfig]:
    """Feasible cells of the cartesian product.

    Two rules prune the raw product. With no adapter the rank and dora axes do
    nothing, so mode 'none' keeps one representative (first rank, dora off).
    With an adapter the base weights are pinned and only adapter parameters
    ever train, so the fine-tune axis collapses to its first value. On the
    published axes this yields 416 of 960.
    """
    out: list[RunConfig] = []
    seen: set[tuple] = set()
    for amp in spec.amp:
        for lr in spec.lr:
            for bs in spec.batch_size:
                for mode in spec.lora_mode:
                    for rank in spec.lora_rank:
                        for dora in spec.dora:
                            for ft in spec.fine_tune_mode:
                                for ep in spec.epochs:
                                    if mode == "none":
                                        key = (amp, lr, bs, mode, None, None, ft, ep)
                                        cell = RunConfig(amp, lr, bs, spec.lora_rank[0],
                                                         mode, False, ft, ep)
                                    else:
                                        key = (amp, lr, bs, mode, rank, dora, None, ep)
                                        cell = RunConfig(amp, lr, bs, rank, mode, dora,
                                                         spec.fine_tune_mode[0], ep)
                                    if key not in seen:
                                        seen.add(key)
                                        out.append(cell)
    return out


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def train_config_for(rc: RunConfig, seed: int = 0, encoder=None) -> TrainConfig:
    adapter = AdapterConfig(rank=rc.lora_rank, mode=rc.lora_mode, use_dora=rc.dora) \
        if rc.lora_mode != "none" else AdapterConfig(mode="none")
    model = ModelConfig(encoder=encoder or desk_config(), seed=seed)
    return TrainConfig(model=model, adapter=adapter, fine_tune_mode=rc.fine_tune_mode,
                       epochs=rc.epochs, batch_size=rc.batch_size, amp=rc.amp,
                       lr=rc.lr, seed=seed)


def desk_runner(rc: RunConfig, n_per_task: int = 128, data_seed: int = 0,
                seed: int = 0, encoder=None) -> RunMetrics:
    """Default run: synthetic data at the requested batch size, one fit()."""
    loaders, _ = desk_data(seed=data_seed, n_per_task=n_per_task,
                           batch_size=rc.batch_size)
    cfg = train_config_for(rc, seed=seed, encoder=encoder)
    _, metrics = fit(cfg, loaders["train"], loaders["dev"])
    return metrics


METRIC_COLUMNS = ("avg_epoch_ms", "avg_peak_bytes",
                  "sst_acc", "para_acc", "sts_pearson", "overall")

COLUMNS = ("config_id", "amp", "mode", "rank", "dora", "fine_tune_mode",
           "batch_size", "lr", "task", *METRIC_COLUMNS,
           *(f"normalized_{c}" for c in METRIC_COLUMNS), "status")


def _identity_cells(rc: RunConfig) -> dict:
    inert = rc.lora_mode == "none"
    return {
        "config_id": rc.config_id,
        "amp": rc.amp,
        "mode": rc.lora_mode,
        "rank": "" if inert else rc.lora_rank,
        "dora": "" if inert else rc.dora,
        "fine_tune_mode": rc.fine_tune_mode,
        "batch_size": rc.batch_size,
        "lr": rc.lr,
    }


def _rows_for(rc: RunConfig, runner) -> list[dict]:
    base = _identity_cells(rc)
    try:
        metrics = runner(rc)
    except Exception as exc:
        # feasible-but-failed runs stay in the table with a reason code
        return [{**base, "task": "", "status": f"failed:{type(exc).__name__}"}]
    scores = metrics.epoch_scores[-1]
    rows = []
    for task in TASK_ORDER:
        rows.append({**base, "task": task,
                     "avg_epoch_ms": metrics.avg_epoch_ms(task),
                     "avg_peak_bytes": metrics.avg_peak_bytes(task),
                     "sst_acc": scores["sst_acc"],
                     "para_acc": scores["para_acc"],
                     "sts_pearson": scores["sts_pearson"],
                     "overall": scores["overall"],
                     "status": "ok"})
    return rows


def run_grid(configs: list[RunConfig], parallelism: int = 1,
             runner=None) -> list[dict]:
    """One table row per (config, task); failed configs get a single row.

    Runs share nothing: every fit() owns its model, optimizers, and memory
    ledger, so concurrent execution changes row timing but no other cell.
    """
    runner = runner or desk_runner
    if parallelism <= 1:
        chunks = [_rows_for(rc, runner) for rc in configs]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as ex:
            chunks = list(ex.map(partial(_rows_for, runner=runner), configs))
    return [row for chunk in chunks for row in chunk]


def normalize(table: list[dict], baseline_id: str) -> list[dict]:
    """Divide every metric column by the baseline config's same-task row."""
    base = {r["task"]: r for r in table
            if r["config_id"] == baseline_id and r["status"] == "ok"}
    if not base:
        raise ValueError(f"baseline {baseline_id!r} has no successful rows")
    out = []
    for row in table:
        row = dict(row)
        ref = base.get(row.get("task"))
        if row["status"] == "ok" and ref is not None:
            for col in METRIC_COLUMNS:
                denom = ref[col]
                row[f"normalized_{col}"] = row[col] / denom if denom else float("nan")
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def ablation_suite(rank: int = 2, epochs: int = 3, lr: float = 2e-3,
                   batch_size: int = 32, n_per_task: int = 128, seed: int = 0,
                   parallelism: int = 1, runner=None) -> list[dict]:
    """AMP x adapter ablation at desk scale, normalized to fp32/no-adapter.

    The raw grid is 12 cells ({amp off,on} x {none, attn, attn-only} x
    {lora, dora}); the feasibility collapse leaves 10 runs because 'none'
    ignores the lora/dora split.
    """
    spec = GridSpec(amp=[False, True], lr=[lr], batch_size=[batch_size],
                    lora_rank=[rank], lora_mode=["none", "attn", "attn-only"],
                    dora=[False, True], fine_tune_mode=["full-model"],
                    epochs=[epochs])
    configs = expand_grid(spec)
    runner = runner or partial(desk_runner, n_per_task=n_per_task,
                               data_seed=seed, seed=seed)
    table = run_grid(configs, parallelism, runner)
    baseline = next(rc.config_id for rc in configs
                    if not rc.amp and rc.lora_mode == "none")
    return normalize(table, baseline)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def _best(table, col, pick):
    ok = [r for r in table if r["status"] == "ok" and r.get(col, "") != ""]
    if not ok:
        return None
    row = pick(ok, key=lambda r: r[col])
    where = f" [{row['task']}]" if col in ("avg_epoch_ms", "avg_peak_bytes") else ""
    return f"best {col}: {row['config_id']}{where} ({row[col]:.6g})"


def summarize(table: list[dict]) -> str:
    lines = [_best(table, "overall", max), _best(table, "sst_acc", max),
             _best(table, "para_acc", max), _best(table, "sts_pearson", max),
             _best(table, "avg_epoch_ms", min), _best(table, "avg_peak_bytes", min)]
    failed = sorted({r["config_id"] for r in table if r["status"] != "ok"})
    if failed:
        lines.append(f"failed configs: {', '.join(failed)}")
    return "\n".join(line for line in lines if line)


def emit_report(table: list[dict], path) -> str:
    """Write the table as CSV and return a best-per-metric summary.

    Column order is fixed; re-emitting the same table reproduces the file
    byte for byte.
    """
    if not table:
        raise ValueError("cannot emit a report for an empty table")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(COLUMNS)
        for row in table:
            writer.writerow([row.get(col, "") for col in COLUMNS])
    return summarize(table)
