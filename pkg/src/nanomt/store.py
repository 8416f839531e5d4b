"""Named parameter registry partitioned into the base set and per-task bundles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .errors import TaskExistsError, TaskNotFoundError

BASE = None  # partition tag for base-model parameters


@dataclass
class _Entry:
    tensor: Tensor
    task: str | None  # BASE or the owning bundle's task id


class ParameterStore:
    """Ordered map name -> parameter with per-entry trainable/frozen state.

    The frozen flag is carried by ``tensor.requires_grad`` so the autodiff
    tape never allocates gradients for frozen entries. Iteration order is the
    insertion order, which is deterministic.
    """

    def __init__(self):
        self._entries: dict[str, _Entry] = {}

    def add(self, name: str, tensor: Tensor, task: str | None = BASE,
            frozen: bool = False) -> Tensor:
        if name in self._entries:
            raise TaskExistsError(f"parameter {name!r} already registered")
        tensor.requires_grad = not frozen
        self._entries[name] = _Entry(tensor, task)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self, task: str | None = BASE) -> list[str]:
        return [n for n, e in self._entries.items() if e.task == task]

    def task_of(self, name: str) -> str | None:
        return self._entries[name].task

    def tasks(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self._entries.values():
            if e.task is not BASE:
                seen.setdefault(e.task)
        return list(seen)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name, entry in self._entries.items():
            yield name, entry.tensor

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        for name, entry in self._entries.items():
            if entry.tensor.requires_grad:
                yield name, entry.tensor

    def is_frozen(self, name: str) -> bool:
        return not self._entries[name].tensor.requires_grad

    def freeze_base(self) -> None:
        for entry in self._entries.values():
            if entry.task is BASE:
                entry.tensor.requires_grad = False
                entry.tensor.zero_grad()

    def set_trainable_all(self) -> None:
        for entry in self._entries.values():
            entry.tensor.requires_grad = True

    def set_trainable_task(self, task: str) -> None:
        """Make exactly the named bundle trainable; freeze everything else."""
        if task not in self.tasks():
            raise TaskNotFoundError(f"no adapter bundle for task {task!r}")
        for entry in self._entries.values():
            entry.tensor.requires_grad = entry.task == task
            if not entry.tensor.requires_grad:
                entry.tensor.zero_grad()

    def zero_grads(self) -> None:
        for entry in self._entries.values():
            entry.tensor.zero_grad()

    def snapshot(self, task: str | None = BASE) -> dict[str, np.ndarray]:
        """Deep copy of one partition's arrays, keyed by name."""
        return {
            n: e.tensor.data.copy()
            for n, e in self._entries.items() if e.task == task
        }

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, data in snapshot.items():
            self._entries[name].tensor.data = data.copy()
