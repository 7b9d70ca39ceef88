"""End-of-task consolidation: relevance scores, kernel freezing, gradient
masking, and capacity accounting.

After a task trains, each gate's firing probability on the task's validation
set decides the fate of its kernel: fired at least at the threshold -> frozen
for that task (usable later, never updated); never fired -> re-initialized and
left trainable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .backbone import FREE, ContinualGatedNet, GatedConv
from .errors import ConsolidationError


@dataclass
class RelevanceTable:
    """Firing probabilities r[site][kernel][task], populated at consolidation."""

    entries: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)

    def put(self, site: int, task: int, values: torch.Tensor):
        self.entries[(site, task)] = values.clone()

    def get(self, site: int, task: int) -> torch.Tensor:
        return self.entries[(site, task)]

    def tasks(self) -> list[int]:
        return sorted({t for (_, t) in self.entries})

    def rows(self):
        for (site, task), values in sorted(self.entries.items()):
            for kernel, v in enumerate(values.tolist()):
                yield {"site": site, "kernel": kernel, "task": task,
                       "relevance": v}


@dataclass
class LayerCapacity:
    site: int
    free: int
    frozen: int
    by_task: dict[int, int]


@dataclass
class CapacityReport:
    """Free/frozen kernel counts per gated site with per-task attribution."""

    layers: list[LayerCapacity]

    @property
    def saturated(self) -> bool:
        return any(layer.free == 0 for layer in self.layers)

    def to_dict(self) -> dict:
        return {"layers": [{"site": l.site, "free": l.free, "frozen": l.frozen,
                            "by_task": {str(k): v for k, v in sorted(l.by_task.items())}}
                           for l in self.layers],
                "saturated": self.saturated}


@dataclass
class ConsolidationReport:
    task_id: int
    frozen_per_site: list[int]
    reinit_per_site: list[int]

    def to_dict(self) -> dict:
        return {"task_id": self.task_id,
                "frozen_per_site": self.frozen_per_site,
                "reinit_per_site": self.reinit_per_site}


def estimate_firing(model: ContinualGatedNet, inputs: torch.Tensor,
                    task_id: int, samples_per_input: int = 1,
                    stochastic: bool = True,
                    generator: torch.Generator | None = None,
                    strict_mask: bool = True,
                    batch_size: int = 512) -> list[torch.Tensor]:
    """Mean gate-firing indicator per site for one task's stream.

    stochastic=True draws train-mode gates (logistic noise) so the estimate
    converges to the per-input firing probability; stochastic=False counts
    deterministic eval-mode decisions. Runs under the model's eval() statistics.
    """
    if inputs.numel() == 0:
        raise ConsolidationError("firing estimation needs a non-empty input set")
    mode = "train" if stochastic else "eval"
    draws = samples_per_input if stochastic else 1
    sums: list[torch.Tensor] | None = None
    total = 0
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for _ in range(draws):
                for start in range(0, inputs.shape[0], batch_size):
                    batch = inputs[start:start + batch_size]
                    _, records = model.forward_stream(
                        batch, task_id, gate_mode=mode, generator=generator,
                        strict_mask=strict_mask, collect=True)
                    if sums is None:
                        sums = [r.gates.hard.sum(dim=0) for r in records]
                    else:
                        for s, r in zip(sums, records):
                            s += r.gates.hard.sum(dim=0)
                    total += batch.shape[0]
    finally:
        model.train(was_training)
    assert sums is not None
    return [s / total for s in sums]


def compute_relevance(model: ContinualGatedNet, val_inputs: torch.Tensor,
                      task_id: int, samples_per_input: int = 1,
                      stochastic: bool = True,
                      generator: torch.Generator | None = None) -> list[torch.Tensor]:
    """Per-kernel firing probabilities of task `task_id` on its validation set.

    The task is about to be consolidated, so its own stream runs without a
    permitted-mask clamp (none exists yet); kernels frozen by earlier tasks
    may fire and simply remain frozen.
    """
    if task_id in model.consolidated:
        raise ConsolidationError(f"task {task_id} is already consolidated")
    return estimate_firing(model, val_inputs, task_id,
                           samples_per_input=samples_per_input,
                           stochastic=stochastic, generator=generator,
                           strict_mask=True)


def consolidate(model: ContinualGatedNet, relevance: list[torch.Tensor],
                task_id: int, threshold: float = 0.0,
                generator: torch.Generator | None = None,
                relevance_table: RelevanceTable | None = None) -> ConsolidationReport:
    """Freeze fired kernels, re-initialize silent ones, lock the task's modules.

    Kernels already frozen by earlier tasks are untouched regardless of their
    relevance here. The task's permitted-kernel snapshot is taken after
    freezing, so strict masking pins the stream to kernels that can never
    change again.
    """
    if threshold < 0:
        raise ConsolidationError(f"threshold must be >= 0, got {threshold}")
    if task_id in model.consolidated:
        raise ConsolidationError(f"task {task_id} is already consolidated")
    sites = model.sites()
    if len(relevance) != len(sites):
        raise ConsolidationError(
            f"relevance has {len(relevance)} site entries, model has {len(sites)}")
    frozen_counts, reinit_counts = [], []
    for i, (site, r) in enumerate(zip(sites, relevance)):
        if r.numel() != site.out_channels:
            raise ConsolidationError(
                f"site {i}: relevance length {r.numel()} != {site.out_channels}")
        free = site.free_mask()
        newly_frozen = free & (r > threshold)
        to_reinit = free & ~newly_frozen
        site.owner[newly_frozen] = task_id
        _reinit_kernels(site, to_reinit, generator)
        site.set_permitted_mask(task_id, site.owner != FREE)
        frozen_counts.append(int(newly_frozen.sum()))
        reinit_counts.append(int(to_reinit.sum()))
        if relevance_table is not None:
            relevance_table.put(i, task_id, r)
        site.gate_module(task_id).freeze()
    head = model.head(task_id)
    for p in head.parameters():
        p.requires_grad_(False)
    for unit in model.units:
        for dname in ("bn1", "bn2", "bns"):
            d = getattr(unit, dname, None)
            if d is not None and str(task_id) in d:
                bn = d[str(task_id)]
                for p in bn.parameters():
                    p.requires_grad_(False)
                bn.eval()
    model.consolidated.add(task_id)
    return ConsolidationReport(task_id, frozen_counts, reinit_counts)


def _reinit_kernels(site: GatedConv, mask: torch.Tensor,
                    generator: torch.Generator | None):
    """Fresh init for the selected output kernels, same family/scale as the
    first-time initializer (uniform +-1/sqrt(fan_in))."""
    if not mask.any():
        return
    idx = mask.nonzero(as_tuple=True)[0]
    k = site.conv.kernel_size
    fan_in = site.in_channels * k[0] * k[1]
    bound = 1.0 / fan_in ** 0.5
    shape = (int(mask.sum()), site.in_channels, k[0], k[1])
    with torch.no_grad():
        fresh_w = torch.empty(shape, dtype=site.conv.weight.dtype)
        fresh_w.uniform_(-bound, bound, generator=generator)
        fresh_b = torch.empty(shape[0], dtype=site.conv.bias.dtype)
        fresh_b.uniform_(-bound, bound, generator=generator)
        site.conv.weight[idx] = fresh_w
        site.conv.bias[idx] = fresh_b


def apply_grad_mask(gradients: torch.Tensor, ownership: torch.Tensor) -> torch.Tensor:
    """Zero gradient slices belonging to frozen kernels (dim 0 = kernel)."""
    if gradients.shape[0] != ownership.shape[0]:
        raise ConsolidationError(
            f"gradient dim0 {gradients.shape[0]} != ownership {ownership.shape[0]}")
    keep = (ownership == FREE).to(gradients.dtype)
    return gradients * keep.view(-1, *([1] * (gradients.dim() - 1)))


def mask_frozen_grads_(model: ContinualGatedNet):
    """In-place grad masking on every gated site's conv weight and bias."""
    for site in model.sites():
        frozen = site.owner != FREE
        if not frozen.any():
            continue
        if site.conv.weight.grad is not None:
            site.conv.weight.grad[frozen] = 0
        if site.conv.bias.grad is not None:
            site.conv.bias.grad[frozen] = 0


def capacity_report(model: ContinualGatedNet) -> CapacityReport:
    layers = []
    for i, site in enumerate(model.sites()):
        owner = site.owner
        frozen = int((owner != FREE).sum())
        by_task: dict[int, int] = {}
        for t in owner[owner != FREE].tolist():
            by_task[t] = by_task.get(t, 0) + 1
        layers.append(LayerCapacity(site=i, free=site.out_channels - frozen,
                                    frozen=frozen, by_task=by_task))
    return CapacityReport(layers=layers)
