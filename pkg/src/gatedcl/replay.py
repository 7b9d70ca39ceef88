"""Episodic memory and rehearsal-batch construction for the task classifier.

The buffer holds real examples tagged with their task id. At every task
boundary each stored task is cut back to floor(capacity / t) examples and the
finished task contributes the same number. Rehearsal batches mix the buffer
with the current batch so task labels are uniform up to integer rounding,
larger remainders going to lower task ids.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import torch

from .errors import ReplayError


class MemoryProvider(Protocol):
    """Source of past-task examples; lets a generative provider slot in
    without trainer changes."""

    def tasks(self) -> list[int]: ...

    def sample(self, task_id: int, n: int,
               generator: torch.Generator | None = None) -> torch.Tensor: ...


@dataclass
class RehearsalBatch:
    inputs: torch.Tensor
    task_labels: torch.Tensor
    # (task_id, start, stop) slices into `inputs`, ascending task order.
    spans: list[tuple[int, int, int]]
    # per-span positions into the donor pool (the buffer's task pool, or the
    # current batch), so callers can reuse features computed elsewhere.
    span_indices: list[torch.Tensor] = None

    def counts(self) -> dict[int, int]:
        uniq, cnt = torch.unique(self.task_labels, return_counts=True)
        return {int(t): int(c) for t, c in zip(uniq, cnt)}


class EpisodicBuffer:
    """Capacity-bounded store of (input, class label, task id) examples."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ReplayError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.inputs: dict[int, torch.Tensor] = {}
        self.labels: dict[int, torch.Tensor] = {}

    @property
    def disabled(self) -> bool:
        return self.capacity == 0

    def __len__(self) -> int:
        return sum(x.shape[0] for x in self.inputs.values())

    def tasks(self) -> list[int]:
        return sorted(self.inputs)

    def holdings(self, task_id: int) -> int:
        return self.inputs[task_id].shape[0] if task_id in self.inputs else 0

    def end_of_task(self, task_id: int, inputs: torch.Tensor,
                    labels: torch.Tensor,
                    generator: torch.Generator | None = None):
        """Shrink every stored task to floor(C/t) and admit the new task."""
        if self.disabled:
            return
        if task_id < 1:
            raise ReplayError(f"task id must be >= 1, got {task_id}")
        t = len(self.inputs) + 1
        m = self.capacity // t
        for old in list(self.inputs):
            keep = min(m, self.inputs[old].shape[0])
            perm = torch.randperm(self.inputs[old].shape[0], generator=generator)
            sel = perm[:keep]
            self.inputs[old] = self.inputs[old][sel].clone()
            self.labels[old] = self.labels[old][sel].clone()
        take = min(m, inputs.shape[0])
        perm = torch.randperm(inputs.shape[0], generator=generator)
        sel = perm[:take]
        self.inputs[task_id] = inputs[sel].clone()
        self.labels[task_id] = labels[sel].clone()

    def sample_indices(self, task_id: int, n: int,
                       generator: torch.Generator | None = None) -> torch.Tensor:
        """Indices of n uniform draws from one task's pool; with replacement
        only when the pool is smaller than the request."""
        if task_id not in self.inputs:
            raise ReplayError(f"no stored examples for task {task_id}")
        return _uniform_indices(self.inputs[task_id].shape[0], n, generator)

    def sample(self, task_id: int, n: int,
               generator: torch.Generator | None = None) -> torch.Tensor:
        return self.inputs[task_id][self.sample_indices(task_id, n, generator)]

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        for t in self.tasks():
            out[f"buffer.task{t}.inputs"] = self.inputs[t]
            out[f"buffer.task{t}.labels"] = self.labels[t]
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]):
        self.inputs.clear()
        self.labels.clear()
        for name, tensor in tensors.items():
            if not name.startswith("buffer.task"):
                continue
            rest = name[len("buffer.task"):]
            tid, kind = rest.split(".", 1)
            if kind == "inputs":
                self.inputs[int(tid)] = tensor.clone()
            elif kind == "labels":
                self.labels[int(tid)] = tensor.clone()

    def stats(self) -> dict:
        return {"capacity": self.capacity,
                "stored": len(self),
                "per_task": {str(t): self.holdings(t) for t in self.tasks()},
                "bytes": sum(x.numel() * x.element_size()
                             for x in self.inputs.values())}


def _uniform_indices(pool_size: int, n: int,
                     generator: torch.Generator | None) -> torch.Tensor:
    if pool_size <= 0:
        raise ReplayError("cannot sample from an empty pool")
    if n <= pool_size:
        return torch.randperm(pool_size, generator=generator)[:n]
    return torch.randint(pool_size, (n,), generator=generator)


def task_quotas(batch_size: int, num_tasks: int) -> list[int]:
    """Per-task example counts: floor(B/t) each, remainder to lowest ids."""
    if batch_size <= 0:
        raise ReplayError(f"batch size must be positive, got {batch_size}")
    if num_tasks <= 0:
        raise ReplayError(f"need at least one task, got {num_tasks}")
    base, rem = divmod(batch_size, num_tasks)
    return [base + (1 if i < rem else 0) for i in range(num_tasks)]


def make_rehearsal_batch(buffer: EpisodicBuffer, current_inputs: torch.Tensor,
                         current_task: int, batch_size: int,
                         generator: torch.Generator | None = None) -> RehearsalBatch:
    """Uniform-over-tasks batch drawn from buffer plus the current batch."""
    past = [p for p in buffer.tasks() if p != current_task]
    if current_task > 1 and not past:
        raise ReplayError(
            "rehearsal at task > 1 requires stored examples (buffer empty)")
    tasks = past + [current_task]
    quotas = task_quotas(batch_size, len(tasks))
    chunks, labels, spans, span_indices = [], [], [], []
    offset = 0
    for task_id, quota in zip(tasks, quotas):
        if quota == 0:
            continue
        if task_id == current_task:
            idx = _uniform_indices(current_inputs.shape[0], quota, generator)
            chunks.append(current_inputs[idx])
        else:
            idx = buffer.sample_indices(task_id, quota, generator)
            chunks.append(buffer.inputs[task_id][idx])
        labels.append(torch.full((quota,), task_id, dtype=torch.long))
        spans.append((task_id, offset, offset + quota))
        span_indices.append(idx)
        offset += quota
    return RehearsalBatch(inputs=torch.cat(chunks),
                          task_labels=torch.cat(labels),
                          spans=spans, span_indices=span_indices)
