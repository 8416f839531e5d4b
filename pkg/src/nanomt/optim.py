"""Adaptive-moment optimizer and the warm-up / inverse-square-root schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .store import ParameterStore

BETA1 = 0.9
BETA2 = 0.98
EPS = 1e-9
CLIP_NORM = 1.0


def lr_schedule(step: int, base: float, warmup: int, d_model: int) -> float:
    """Learning rate at 1-indexed ``step``: linear warm-up, then step^-0.5 decay.

    base * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); continuous at
    step == warmup.
    """
    if step < 1:
        raise ContractError(f"lr_schedule is 1-indexed, got step={step}")
    if warmup < 1:
        raise ContractError(f"warmup must be >= 1, got {warmup}")
    return base * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    """Step counter plus first/second moment accumulators per trainable parameter."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParameterStore) -> "OptimizerState":
        state = cls()
        for name, tensor in store.trainable():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state

    def reset(self) -> None:
        self.step = 0
        for buf in self.m.values():
            buf[...] = 0.0
        for buf in self.v.values():
            buf[...] = 0.0


def global_grad_norm(store: ParameterStore) -> float:
    total = 0.0
    for _, tensor in store.trainable():
        if tensor.grad is not None:
            total += float(np.sum(tensor.grad * tensor.grad))
    return math.sqrt(total)


def optimizer_step(store: ParameterStore, state: OptimizerState, lr: float,
                   clip_norm: float = CLIP_NORM) -> None:
    """One adaptive-moment update of the trainable parameters.

    Gradients are globally norm-clipped at ``clip_norm`` first; bias-corrected
    moments follow. Grad buffers are cleared afterwards.
    """
    state.step += 1
    scale = 1.0
    if clip_norm > 0.0:
        norm = global_grad_norm(store)
        if norm > clip_norm:
            scale = clip_norm / norm

    correct1 = 1.0 - BETA1 ** state.step
    correct2 = 1.0 - BETA2 ** state.step
    for name, tensor in store.trainable():
        if tensor.grad is None:
            continue
        g = tensor.grad if scale == 1.0 else tensor.grad * scale
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        tensor.data -= lr * (m / correct1) / (np.sqrt(v / correct2) + EPS)
        tensor.zero_grad()
