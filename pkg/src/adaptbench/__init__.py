"""Parameter-efficient fine-tuning workbench for small transformer encoders.

The public surface mirrors how the pieces compose: build a model, maybe
inject adapters, fit it, then ensemble or benchmark the results.
"""

from .adapters import AdapterConfig, inject, manage_freezing
from .bench import GridSpec, ablation_suite, emit_report, expand_grid, normalize, run_grid
from .data import Vocab, desk_data, load_tsv, synth_tasks
from .encoder import Encoder, EncoderConfig, bert_base_config, desk_config
from .ensemble import Ensemble, load_ensemble
from .heads import ModelConfig, MultitaskModel
from .losses import DEFAULT_SPECS, LossSpec, composite_loss
from .optim import EMA, SGD, Adam, Adamax, make_optimizer
from .tensor import MemoryLedger, Tensor, autocast, no_grad
from .train import (
    TrainConfig,
    build_model,
    evaluate,
    fit,
    load_checkpoint,
    overall_score,
    save_checkpoint,
    task_loss,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig", "inject", "manage_freezing",
    "GridSpec", "ablation_suite", "emit_report", "expand_grid", "normalize", "run_grid",
    "Vocab", "desk_data", "load_tsv", "synth_tasks",
    "Encoder", "EncoderConfig", "bert_base_config", "desk_config",
    "Ensemble", "load_ensemble",
    "ModelConfig", "MultitaskModel",
    "DEFAULT_SPECS", "LossSpec", "composite_loss", "task_loss",
    "EMA", "SGD", "Adam", "Adamax", "make_optimizer",
    "MemoryLedger", "Tensor", "autocast", "no_grad",
    "TrainConfig", "build_model", "evaluate", "fit",
    "load_checkpoint", "overall_score", "save_checkpoint",
]
