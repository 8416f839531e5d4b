"""Desk-scale NMT training with per-task residual adapters."""

from .adapters import (AdapterBundle, AdapterConfig, AdapterModule,
                       adapter_forward, count_adapter_params, create_bundle,
                       set_trainable)
from .autodiff import Tape, Tensor, grad_check
from .bleu import corpus_bleu
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (Corpus, RawTask, SyntheticTaskSpec, TaskSpec, Vocab,
                   build_vocab, load_tasks, make_synthetic_task,
                   prepend_task_token, sample_stream, subsample,
                   temperature_distribution, tokenize_task, write_manifest)
from .model import AdaptedModel, ModelConfig, Transformer, inject, remove
from .optim import OptimizerState, lr_schedule, optimizer_step
from .store import ParameterStore
from .training import (TrainConfig, adapt, bundle_from_checkpoint, evaluate,
                       full_finetune, model_from_checkpoint, pretrain)

__version__ = "0.1.0"

__all__ = [
    "AdapterBundle", "AdapterConfig", "AdapterModule", "adapter_forward",
    "count_adapter_params", "create_bundle", "set_trainable",
    "Tape", "Tensor", "grad_check",
    "corpus_bleu",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "Corpus", "RawTask", "SyntheticTaskSpec", "TaskSpec", "Vocab",
    "build_vocab", "load_tasks", "make_synthetic_task", "prepend_task_token",
    "sample_stream", "subsample", "temperature_distribution", "tokenize_task",
    "write_manifest",
    "AdaptedModel", "ModelConfig", "Transformer", "inject", "remove",
    "OptimizerState", "lr_schedule", "optimizer_step",
    "ParameterStore",
    "TrainConfig", "adapt", "bundle_from_checkpoint", "evaluate",
    "full_finetune", "model_from_checkpoint", "pretrain",
]
