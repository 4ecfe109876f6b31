"""Multitask training harness.

Runs per-epoch task loops (sequential or interleaved), dynamic loss scaling
for mixed precision, the epoch-indexed unfreezing controller, per-task wall
time and peak-memory accounting, dev evaluation, and checkpointing. A fit()
run owns all of its mutable state (model, optimizers, ledger, RNG), so
independent runs can execute concurrently.
"""
from __future__ import annotations

import json
import math
import struct
import time
import warnings
from dataclasses import dataclass, field, asdict
from decimal import ROUND_HALF_UP, Decimal
import numpy as np

from .adapters import AdapterConfig, inject, manage_freezing, _encoders
from .heads import ModelConfig, MultitaskModel
from .losses import DEFAULT_SPECS, LossSpec
from .optim import EMA, MultiplicativeLR, Optimizer, apply_schedule, build_task_optimizers
from .tensor import MemoryLedger, Tensor, active_ledger, autocast, no_grad, use_ledger

TASK_ORDER = ("sst", "para", "sts")
FINE_TUNE_MODES = ("last-layer", "full-model", "iterative")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    fine_tune_mode: str = "full-model"
    epochs: int = 3
    batch_size: int = 32
    amp: bool = False
    schedule: str = "sequential"
    train_sst: bool = True
    train_para: bool = True
    train_sts: bool = True
    num_sst_trains: int = 1
    num_quora_trains: int = 1
    num_sts_trains: int = 1
    quora_start_epoch: int = 0
    loss_specs: dict[str, LossSpec] | None = None
    optim_kind: str = "adamax"
    lr: float = 1e-3
    lr_lambda: float | None = None
    lr_multipliers: dict[str, float] = field(default_factory=dict)
    weight_decays: dict[str, float] = field(default_factory=dict)
    use_ema: bool = False
    ema_decay: float = 0.999
    seed: int = 0

    def __post_init__(self) -> None:
        if self.fine_tune_mode not in FINE_TUNE_MODES:
            raise ValueError(f"fine_tune_mode must be one of {FINE_TUNE_MODES}")
        if self.schedule not in ("sequential", "interleaved"):
            raise ValueError(f"schedule must be sequential or interleaved, got {self.schedule!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.train_sst or self.train_para or self.train_sts):
            raise ValueError("at least one task must be enabled")
        repeats = (self.num_sst_trains, self.num_quora_trains, self.num_sts_trains)
        if any(n < 1 for n in repeats):
            raise ValueError(f"per-task train counts must be >= 1, got {repeats}")


@dataclass
class TaskEpochMetrics:
    task: str
    epoch: int
    wall_ms: float
    peak_bytes: int
    activation_bytes: float
    steps: int
    skipped_steps: int
    mean_loss: float


@dataclass
class RunMetrics:
    rows: list[TaskEpochMetrics] = field(default_factory=list)
    epoch_scores: list[dict] = field(default_factory=list)
    directives: list[str] = field(default_factory=list)
    best_score: float = float("-inf")
    best_epoch: int = -1

    def _rows_for(self, task: str) -> list[TaskEpochMetrics]:
        rows = [r for r in self.rows if r.task == task]
        if not rows:
            raise ValueError(f"no metric rows for task {task!r}")
        return rows

    def avg_epoch_ms(self, task: str) -> float:
        rows = self._rows_for(task)
        return sum(r.wall_ms for r in rows) / len(rows)

    def avg_peak_bytes(self, task: str) -> float:
        rows = self._rows_for(task)
        return sum(r.peak_bytes for r in rows) / len(rows)

    def avg_activation_bytes(self, task: str) -> float:
        rows = self._rows_for(task)
        return sum(r.activation_bytes for r in rows) / len(rows)


# ---------------------------------------------------------------------------
# loss scaling
# ---------------------------------------------------------------------------

class LossScaler:
    """Dynamic gradient scale: halve on overflow, double after an interval of
    clean steps. Power-of-two scales keep scale/unscale bit-exact."""

    def __init__(self, init_scale: float = 2.0 ** 16, growth: float = 2.0,
                 backoff: float = 0.5, growth_interval: int = 200):
        if init_scale <= 0:
            raise ValueError(f"scale must be positive, got {init_scale}")
        self.scale = float(init_scale)
        self.growth = float(growth)
        self.backoff = float(backoff)
        self.growth_interval = int(growth_interval)
        self.clean_steps = 0

    def grads_nonfinite(self, params) -> bool:
        return any(p.grad is not None and not np.isfinite(p.grad).all() for p in params)

    def unscale_grads(self, params) -> None:
        inv = np.float32(1.0 / self.scale)
        for p in params:
            if p.grad is not None:
                p.grad *= inv

    def update(self, overflow: bool) -> None:
        if overflow:
            self.scale *= self.backoff
            self.clean_steps = 0
        else:
            self.clean_steps += 1
            if self.clean_steps >= self.growth_interval:
                self.scale *= self.growth
                self.clean_steps = 0


def amp_step(loss_fn, scaler: LossScaler, optimizer: Optimizer, ema: EMA | None = None):
    """One mixed-precision step. Returns (outcome, loss_value) where outcome
    is "applied" or "skipped"; a skip touches nothing but the scaler."""
    optimizer.zero_grad()
    with autocast():
        loss = loss_fn()
    scaled = loss * scaler.scale
    scaled.backward()
    if scaler.grads_nonfinite(optimizer.params):
        optimizer.zero_grad()
        scaler.update(overflow=True)
        return "skipped", loss.data.item()
    scaler.unscale_grads(optimizer.params)
    optimizer.step()
    optimizer.zero_grad()
    scaler.update(overflow=False)
    if ema is not None:
        ema.update()
    return "applied", loss.data.item()


def plain_step(loss_fn, optimizer: Optimizer, ema: EMA | None = None):
    optimizer.zero_grad()
    loss = loss_fn()
    loss.backward()
    optimizer.step()
    optimizer.zero_grad()
    if ema is not None:
        ema.update()
    return "applied", loss.data.item()


# ---------------------------------------------------------------------------
# unfreezing controller
# ---------------------------------------------------------------------------

def controller_directive(epoch: int, fine_tune_mode: str, num_layers: int) -> str:
    if fine_tune_mode == "last-layer":
        return "freezeall"
    if fine_tune_mode == "full-model":
        return "unfreezeall"
    if epoch == 0:
        return "freezeall"
    if epoch >= 4:
        return "unfreezeall"
    quarter = {1: 1, 2: 2, 3: 3}[epoch]
    return f"unfreezetop{math.ceil(quarter * num_layers / 4)}"


def unfreezing_controller(model: MultitaskModel, epoch: int, fine_tune_mode: str) -> str:
    num_layers = len(_encoders(model)[0][1].layers)
    directive = controller_directive(epoch, fine_tune_mode, num_layers)
    manage_freezing(model, directive)
    return directive


# ---------------------------------------------------------------------------
# epoch loops
# ---------------------------------------------------------------------------

def _enabled_tasks(cfg: TrainConfig, epoch: int) -> list[str]:
    tasks = []
    if cfg.train_sst:
        tasks.append("sst")
    if cfg.train_para and epoch >= cfg.quora_start_epoch:
        tasks.append("para")
    if cfg.train_sts:
        tasks.append("sts")
    return tasks


def _repeats(cfg: TrainConfig) -> dict[str, int]:
    return {"sst": cfg.num_sst_trains, "para": cfg.num_quora_trains,
            "sts": cfg.num_sts_trains}


def task_loss(model: MultitaskModel, task: str, batch, spec: LossSpec) -> Tensor:
    if task == "sst":
        ids, mask, labels = batch
        return spec(model.predict_sentiment(ids, mask), labels)
    ids1, mask1, ids2, mask2, labels = batch
    if spec.kind == "contrastive":
        return spec(model.bert_sim(ids1, mask1), model.bert_sim(ids2, mask2), labels)
    if task == "para":
        return spec(model.predict_paraphrase(ids1, mask1, ids2, mask2), labels)
    return spec(model.predict_similarity(ids1, mask1, ids2, mask2), labels)


class _TaskStats:
    def __init__(self, task: str):
        self.task = task
        self.wall_ms = 0.0
        self.peak_bytes = 0
        self.activation_total = 0
        self.steps = 0
        self.skipped = 0
        self.loss_total = 0.0

    def record(self, outcome: str, loss: float, activation: int, peak: int, ms: float) -> None:
        self.wall_ms += ms
        self.peak_bytes = max(self.peak_bytes, peak)
        self.activation_total += activation
        self.steps += 1
        self.skipped += outcome == "skipped"
        self.loss_total += loss

    def row(self, epoch: int) -> TaskEpochMetrics:
        return TaskEpochMetrics(
            task=self.task, epoch=epoch, wall_ms=self.wall_ms,
            peak_bytes=self.peak_bytes,
            activation_bytes=self.activation_total / max(self.steps, 1),
            steps=self.steps, skipped_steps=self.skipped,
            mean_loss=self.loss_total / max(self.steps, 1))


def _run_one_step(model, task, batch, spec, optimizer, scaler, ema, stats):
    ledger = active_ledger()
    live0 = ledger.live_bytes
    ledger.reset_peak()
    t0 = time.perf_counter()
    loss_fn = lambda: task_loss(model, task, batch, spec)
    if scaler is None:
        outcome, loss = plain_step(loss_fn, optimizer, ema)
    else:
        outcome, loss = amp_step(loss_fn, scaler, optimizer, ema)
    ms = (time.perf_counter() - t0) * 1e3
    stats.record(outcome, loss, ledger.peak_bytes - live0, ledger.peak_bytes, ms)


def _check_loaders(loaders, tasks) -> None:
    for task in tasks:
        if task not in loaders:
            raise ValueError(f"no loader for enabled task {task!r}")
        if len(loaders[task]) == 0:
            raise ValueError(f"empty {task} loader")


def train_epoch_sequential(model, loaders, optimizers, cfg: TrainConfig, epoch: int,
                           scaler: LossScaler | None = None,
                           ema: EMA | None = None) -> list[TaskEpochMetrics]:
    """Each enabled task in turn, its full loader `num_X_trains` times."""
    tasks = _enabled_tasks(cfg, epoch)
    _check_loaders(loaders, tasks)
    specs = cfg.loss_specs or DEFAULT_SPECS
    repeats = _repeats(cfg)
    rows = []
    for task in tasks:
        stats = _TaskStats(task)
        for _ in range(repeats[task]):
            for batch in loaders[task]:
                _run_one_step(model, task, batch, specs[task], optimizers[task],
                              scaler, ema, stats)
        rows.append(stats.row(epoch))
    return rows


def _repeated_batches(loader, repeats: int):
    for _ in range(repeats):
        yield from loader


def train_epoch_interleaved(model, loaders, optimizers, cfg: TrainConfig, epoch: int,
                            scaler: LossScaler | None = None,
                            ema: EMA | None = None) -> list[TaskEpochMetrics]:
    """Round-robin one batch per task; an exhausted loader drops out of the
    rotation for the rest of the epoch."""
    tasks = _enabled_tasks(cfg, epoch)
    _check_loaders(loaders, tasks)
    specs = cfg.loss_specs or DEFAULT_SPECS
    repeats = _repeats(cfg)
    iters = {t: _repeated_batches(loaders[t], repeats[t]) for t in tasks}
    stats = {t: _TaskStats(t) for t in tasks}
    active = list(tasks)
    sentinel = object()
    while active:
        for task in list(active):
            batch = next(iters[task], sentinel)
            if batch is sentinel:
                active.remove(task)
                continue
            _run_one_step(model, task, batch, specs[task], optimizers[task],
                          scaler, ema, stats[task])
    return [stats[t].row(epoch) for t in tasks]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def overall_score(sst_acc: float, para_acc: float, sts_pearson: float) -> float:
    return (sst_acc + para_acc + (sts_pearson + 1.0) / 2.0) / 3.0


def format_score(x: float) -> str:
    """Round to 3 decimals with half-up ties, via a short decimal rendering so
    binary noise below 1e-9 cannot flip the rounding."""
    return str(Decimal(f"{x:.9f}").quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def evaluate(model: MultitaskModel, dev_loaders: dict) -> dict:
    for task in TASK_ORDER:
        if task not in dev_loaders or len(dev_loaders[task]) == 0:
            raise ValueError(f"evaluate needs a non-empty {task} dev loader")
    was_training = model.training
    model.eval()
    sst_hits = sst_total = 0
    para_hits = para_total = 0
    sts_preds, sts_labels = [], []
    with no_grad():
        for ids, mask, labels in dev_loaders["sst"]:
            pred = model.predict_sentiment(ids, mask).data.argmax(axis=1)
            sst_hits += int((pred == np.asarray(labels)).sum())
            sst_total += len(labels)
        for ids1, m1, ids2, m2, labels in dev_loaders["para"]:
            # sigmoid(logit) > 0.5 is exactly logit > 0
            pred = model.predict_paraphrase(ids1, m1, ids2, m2).data > 0.0
            para_hits += int((pred == (np.asarray(labels) > 0.5)).sum())
            para_total += len(labels)
        for ids1, m1, ids2, m2, labels in dev_loaders["sts"]:
            sts_preds.append(model.predict_similarity(ids1, m1, ids2, m2).data)
            sts_labels.append(np.asarray(labels, dtype=np.float64))
    if was_training:
        model.train()
    preds = np.concatenate(sts_preds).astype(np.float64)
    labels = np.concatenate(sts_labels)
    if np.ptp(preds) == 0.0 or np.ptp(labels) == 0.0:
        warnings.warn("constant STS predictions; recording correlation 0")
        pearson = 0.0
    else:
        pearson = float(np.corrcoef(preds, labels)[0, 1])
    sst_acc = sst_hits / sst_total
    para_acc = para_hits / para_total
    return {"sst_acc": sst_acc, "para_acc": para_acc, "sts_pearson": pearson,
            "overall": overall_score(sst_acc, para_acc, pearson)}


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ADBK"
CHECKPOINT_VERSION = 1


def build_model(model_cfg: ModelConfig, adapter_cfg: AdapterConfig | None = None,
                seed: int = 0) -> MultitaskModel:
    model = MultitaskModel(model_cfg)
    if adapter_cfg is not None and adapter_cfg.mode != "none":
        inject(model, adapter_cfg, seed=seed)
    return model


def save_checkpoint(path, model: MultitaskModel, model_cfg: ModelConfig,
                    adapter_cfg: AdapterConfig | None = None,
                    best_score: float = 0.0) -> None:
    params = list(model.named_parameters())
    buffers = list(model.named_buffers())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model": model_cfg.to_dict(),
        "adapter": asdict(adapter_cfg) if adapter_cfg is not None else None,
        "best_score": float(best_score),
        "params": [[name, list(p.data.shape)] for name, p in params],
        "buffers": [[name, list(b.shape)] for name, b in buffers],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, p in params:
            f.write(p.data.astype("<f4").tobytes())
        for _, b in buffers:
            f.write(b.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[MultitaskModel, dict]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version "
                             f"{header['format_version']}")
        state = {}
        for name, shape in header["params"] + header["buffers"]:
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * n)
            if len(raw) != 4 * n:
                raise ValueError(f"{path}: truncated payload at {name}")
            state[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    model_cfg = ModelConfig.from_dict(header["model"])
    adapter_cfg = AdapterConfig(**header["adapter"]) if header["adapter"] else None
    model = build_model(model_cfg, adapter_cfg)
    model.load_state_dict(state)
    return model, header


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def fit(cfg: TrainConfig, train_loaders: dict, dev_loaders: dict,
        checkpoint_path=None, verbose: bool = False) -> tuple[MultitaskModel, RunMetrics]:
    ledger = MemoryLedger()
    with use_ledger(ledger):
        model = build_model(cfg.model, cfg.adapter, seed=cfg.seed)
        optimizers = build_task_optimizers(
            model, cfg.lr, cfg.lr_multipliers, cfg.weight_decays, cfg.optim_kind)
        schedules = None
        if cfg.lr_lambda is not None:
            schedules = {t: MultiplicativeLR(opt.lr, cfg.lr_lambda)
                         for t, opt in optimizers.items()}
        scaler = LossScaler() if cfg.amp else None
        ema = EMA(model, cfg.ema_decay) if cfg.use_ema else None
        epoch_fn = (train_epoch_sequential if cfg.schedule == "sequential"
                    else train_epoch_interleaved)

        metrics = RunMetrics()
        for epoch in range(cfg.epochs):
            directive = unfreezing_controller(model, epoch, cfg.fine_tune_mode)
            metrics.directives.append(directive)
            if schedules is not None:
                for t, opt in optimizers.items():
                    apply_schedule(opt, schedules[t], epoch)
            for loader in train_loaders.values():
                if hasattr(loader, "set_epoch"):
                    loader.set_epoch(epoch)
            model.train()
            metrics.rows.extend(
                epoch_fn(model, train_loaders, optimizers, cfg, epoch, scaler, ema))
            eval_model = model
            if ema is not None:
                eval_model = ema.apply_to(build_model(cfg.model, cfg.adapter, cfg.seed))
            scores = evaluate(eval_model, dev_loaders)
            metrics.epoch_scores.append(scores)
            if verbose:
                print(f"epoch {epoch}: directive={directive} "
                      f"overall={format_score(scores['overall'])}")
            if scores["overall"] > metrics.best_score:
                metrics.best_score = scores["overall"]
                metrics.best_epoch = epoch
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, eval_model, cfg.model,
                                    cfg.adapter if cfg.adapter.mode != "none" else None,
                                    best_score=scores["overall"])
    return model, metrics
