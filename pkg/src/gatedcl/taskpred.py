"""Task-agnostic inference: parallel per-task gated streams feeding a
single-head task classifier.

Without a task oracle every known task's stream runs over the shared kernels;
the spatially pooled stream outputs are concatenated (ascending task id) and a
small MLP predicts which task the input belongs to. The predicted task selects
the head and stream that produce the class prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import ContinualGatedNet, head_forward
from .errors import ConfigError, GatingError
from .gates import init_linear_

TASK_CLASSIFIER_HIDDEN = 64


class TaskClassifier(nn.Module):
    """MLP over concatenated stream features; one output per observed task.

    Re-instantiated (wider input, one more logit) at every task boundary and
    retrained with rehearsal, so no weight surgery is ever needed.
    """

    def __init__(self, num_tasks: int, feature_width: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        if num_tasks < 1:
            raise ConfigError(f"need at least one task, got {num_tasks}")
        self.num_tasks = num_tasks
        self.feature_width = feature_width
        self.fc1 = nn.Linear(num_tasks * feature_width, TASK_CLASSIFIER_HIDDEN)
        self.fc2 = nn.Linear(TASK_CLASSIFIER_HIDDEN, num_tasks)
        if generator is not None:
            init_linear_(self.fc1, generator)
            init_linear_(self.fc2, generator)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.fc1.in_features:
            raise GatingError(
                f"task-classifier input width {features.shape[-1]}, "
                f"expected {self.fc1.in_features}")
        return self.fc2(torch.relu(self.fc1(features)))


@dataclass
class StreamBundle:
    """Final (pre-pooling) feature maps of streams 1..t for one batch."""

    task_ids: list[int]
    maps: list[torch.Tensor]

    def __post_init__(self):
        if len(self.task_ids) != len(self.maps):
            raise GatingError("bundle task/map count mismatch")
        if not self.task_ids:
            raise GatingError("empty stream bundle")


def parallel_forward(model: ContinualGatedNet, x: torch.Tensor,
                     tasks: list[int] | None = None,
                     gate_mode: str = "eval",
                     generator: torch.Generator | None = None,
                     current_task: int | None = None,
                     strict_mask: bool = True) -> StreamBundle:
    """Run the gated stream of every requested task on the same input.

    Streams share kernels but apply their own gates. When `current_task` is
    given, only that stream samples stochastic train-mode gates; all others
    run deterministically (their modules are frozen anyway).
    """
    if tasks is None:
        tasks = model.known_tasks()
    if not tasks:
        raise ConfigError("parallel_forward needs at least one task")
    maps = []
    for t in sorted(tasks):
        mode = gate_mode if (current_task is None or t == current_task) else "eval"
        final_map, _ = model.forward_stream(
            x, t, gate_mode=mode, generator=generator, strict_mask=strict_mask)
        maps.append(final_map)
    return StreamBundle(task_ids=sorted(tasks), maps=maps)


def task_features(bundle: StreamBundle) -> torch.Tensor:
    """Global-average-pool each stream's map and concatenate, ascending id."""
    widths = {m.shape[1] for m in bundle.maps}
    if len(widths) != 1:
        raise GatingError(f"streams disagree on channel count: {sorted(widths)}")
    pooled = [m.mean(dim=(2, 3)) for m in bundle.maps]
    return torch.cat(pooled, dim=1)


@dataclass
class TaskAgnosticPrediction:
    task_ids: torch.Tensor      # (N,) predicted task id
    class_ids: torch.Tensor     # (N,) within-task class prediction
    task_probs: torch.Tensor    # (N, t) softmax over observed tasks
    class_logits: list[torch.Tensor]  # per-example logits of the chosen head


def _argmax_lowest(t: torch.Tensor) -> torch.Tensor:
    # First occurrence of the maximum: deterministic tie-break toward the
    # lower index.
    return (t == t.max(dim=1, keepdim=True).values).to(torch.uint8).argmax(dim=1)


def predict_taskagnostic(model: ContinualGatedNet, x: torch.Tensor,
                         task_override: torch.Tensor | None = None,
                         strict_mask: bool = True) -> TaskAgnosticPrediction:
    """Joint task + class prediction for a batch without a task oracle.

    `task_override` injects ground-truth task ids (oracle mode), bypassing the
    classifier while keeping the rest of the path identical; used to verify
    equivalence with the task-aware forward.
    """
    if model.task_classifier is None:
        raise ConfigError("model has no trained task classifier")
    tasks = model.known_tasks()
    bundle = parallel_forward(model, x, tasks, gate_mode="eval",
                              strict_mask=strict_mask)
    feats = task_features(bundle)
    logits = model.task_classifier(feats)
    probs = torch.softmax(logits, dim=1)
    if task_override is not None:
        pos = torch.tensor([tasks.index(int(t)) for t in task_override],
                           dtype=torch.long)
    else:
        pos = _argmax_lowest(probs)
    task_ids = torch.tensor([tasks[int(p)] for p in pos], dtype=torch.long)
    pooled = [m.mean(dim=(2, 3)) for m in bundle.maps]
    class_ids = torch.empty(x.shape[0], dtype=torch.long)
    class_logits: list[torch.Tensor] = [None] * x.shape[0]  # type: ignore
    for p in torch.unique(pos):
        sel = (pos == p).nonzero(as_tuple=True)[0]
        t = tasks[int(p)]
        out = head_forward(pooled[int(p)][sel], model.head(t))
        cls = _argmax_lowest(out)
        class_ids[sel] = cls
        for j, row in zip(sel.tolist(), out):
            class_logits[j] = row
    return TaskAgnosticPrediction(task_ids=task_ids, class_ids=class_ids,
                                  task_probs=probs, class_logits=class_logits)
