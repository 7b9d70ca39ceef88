"""Gated convolutional backbones with per-task heads.

The shared kernels are plain convolutions; every task owns a set of gate
modules (one per gated site) that decide, per input, which output channels
run. Output kernels carry an ownership state: free (trainable) or frozen by
the task that first relied on them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, GatingError
from .gates import DEFAULT_TAU, GateModule, GateVector, init_linear_, sample_gates

FREE = -1


@dataclass
class StreamContext:
    """Per-forward options threaded through the unit walk."""

    task_id: int
    gate_mode: str = "eval"           # train | eval | soft
    generator: torch.Generator | None = None
    strict_mask: bool = True
    tau: float = DEFAULT_TAU
    records: list['GateRecord'] = field(default_factory=list)


@dataclass
class GateRecord:
    """A realized GateVector tagged with the site that produced it."""

    site_index: int
    gates: GateVector
    map_shape: tuple


class GatedConv(nn.Module):
    """One gated convolution site: kernels, bias, ownership, per-task gates.

    Ownership is tracked per output kernel. `permitted_<t>` buffers snapshot,
    at consolidation time of task t, which kernels that task's stream may ever
    use again; with strict masking on, gates outside the snapshot are clamped
    to zero so later re-initializations cannot leak into old streams.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 1,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size,
                              stride=stride, padding=padding, bias=True)
        if generator is not None:
            init_conv_(self.conv, generator)
        self.conv.to(memory_format=torch.channels_last)
        self.gates = nn.ModuleDict()
        # width of the map the gate module is conditioned on; a residual
        # block conditions every site on the block input
        self.gate_in_channels = in_channels
        self.register_buffer("owner", torch.full((out_channels,), FREE,
                                                 dtype=torch.long))
        # conv output spatial size, filled in by the owning unit (used by the
        # cost accounting).
        self.out_hw: tuple[int, int] | None = None

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def register_task(self, task_id: int, generator: torch.Generator | None = None):
        key = str(task_id)
        if key in self.gates:
            raise ConfigError(f"task {task_id} already has a gate module here")
        self.gates[key] = GateModule(task_id, self.gate_in_channels,
                                     self.out_channels, generator)

    def gate_module(self, task_id: int) -> GateModule:
        key = str(task_id)
        if key not in self.gates:
            raise ConfigError(f"no gate module for task {task_id}")
        return self.gates[key]

    def permitted_mask(self, task_id: int) -> torch.Tensor | None:
        return getattr(self, f"permitted_{task_id}", None)

    def set_permitted_mask(self, task_id: int, mask: torch.Tensor):
        self.register_buffer(f"permitted_{task_id}", mask.clone())

    def permitted_tasks(self) -> list[int]:
        out = []
        for name, _ in self.named_buffers(recurse=False):
            if name.startswith("permitted_"):
                out.append(int(name.split("_", 1)[1]))
        return sorted(out)

    def free_mask(self) -> torch.Tensor:
        return self.owner == FREE

    def sample_site_gates(self, h_in: torch.Tensor, ctx: StreamContext) -> GateVector:
        """Gate decision conditioned on the site's input map (pooled)."""
        pooled = h_in.mean(dim=(2, 3))
        logits = self.gate_module(ctx.task_id)(pooled)
        gv = sample_gates(logits, ctx.gate_mode, ctx.generator, ctx.tau)
        if ctx.strict_mask:
            mask = self.permitted_mask(ctx.task_id)
            if mask is not None:
                gv = GateVector(values=gv.values * mask.to(gv.values.dtype),
                                logits=gv.logits, noise=gv.noise)
        return gv


def init_conv_(conv: nn.Conv2d, generator: torch.Generator):
    """Default conv init (uniform +-1/sqrt(fan_in)) from an explicit RNG."""
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        conv.weight.uniform_(-bound, bound, generator=generator)
        if conv.bias is not None:
            conv.bias.uniform_(-bound, bound, generator=generator)


def _apply_gate(h: torch.Tensor, gv: GateVector) -> torch.Tensor:
    return h * gv.values[:, :, None, None]


class SimpleConvUnit(nn.Module):
    """conv -> (2x2 max-pool) -> ReLU -> channel gate.

    Pooling runs before the ReLU: the two commute exactly for max-pooling,
    and pooling first touches a quarter of the memory.
    """

    def __init__(self, in_channels: int, out_channels: int, pool: bool,
                 in_hw: tuple[int, int],
                 generator: torch.Generator | None = None):
        super().__init__()
        self.site = GatedConv(in_channels, out_channels, generator=generator)
        self.pool = pool
        self.site.out_hw = in_hw  # 3x3 stride-1 same-padding keeps the size
        h, w = in_hw
        self.out_hw = (h // 2, w // 2) if pool else (h, w)

    def sites(self) -> list[GatedConv]:
        return [self.site]

    def forward_stream(self, h: torch.Tensor, ctx: StreamContext) -> torch.Tensor:
        gv = self.site.sample_site_gates(h, ctx)
        z = self.site.conv(h)
        if self.pool:
            z = F.max_pool2d(z, 2)
        z = F.relu_(z)
        out = _apply_gate(z, gv)
        ctx.records.append(GateRecord(site_index=-1, gates=gv,
                                      map_shape=tuple(out.shape[1:])))
        return out

    def mac_activity(self, active_in: torch.Tensor, unit_records: list[GateRecord]):
        """Per-example (active_in, active_out) for each site; returns the
        outgoing active-channel counts."""
        a_out = unit_records[0].gates.hard.sum(dim=1)
        return [(active_in, a_out)], a_out


class GatedResidualBlock(nn.Module):
    """Residual basic block with gates after the first convolution and after
    the residual addition; the shortcut is gated only when downsampling.

    Batch-norm keeps one affine/statistics copy per task so consolidated
    streams stay immutable.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 in_hw: tuple[int, int],
                 generator: torch.Generator | None = None):
        super().__init__()
        self.downsampling = stride != 1 or in_channels != out_channels
        h, w = in_hw
        oh, ow = math.ceil(h / stride), math.ceil(w / stride)
        self.conv1 = GatedConv(in_channels, out_channels, stride=stride,
                               generator=generator)
        self.conv1.out_hw = (oh, ow)
        self.conv2 = GatedConv(out_channels, out_channels, generator=generator)
        self.conv2.out_hw = (oh, ow)
        self.conv2.gate_in_channels = in_channels
        self.shortcut = None
        if self.downsampling:
            self.shortcut = GatedConv(in_channels, out_channels, kernel_size=1,
                                      stride=stride, padding=0,
                                      generator=generator)
            self.shortcut.out_hw = (oh, ow)
        self.bn1 = nn.ModuleDict()
        self.bn2 = nn.ModuleDict()
        self.bns = nn.ModuleDict()
        self.out_hw = (oh, ow)

    def sites(self) -> list[GatedConv]:
        out = [self.conv1, self.conv2]
        if self.shortcut is not None:
            out.append(self.shortcut)
        return out

    def register_task(self, task_id: int, generator=None):
        key = str(task_id)
        c = self.conv1.out_channels
        self.bn1[key] = nn.BatchNorm2d(c)
        self.bn2[key] = nn.BatchNorm2d(c)
        if self.shortcut is not None:
            self.bns[key] = nn.BatchNorm2d(c)

    def gate_sites_per_stream(self) -> int:
        return 3 if self.downsampling else 2

    def forward_stream(self, h: torch.Tensor, ctx: StreamContext) -> torch.Tensor:
        key = str(ctx.task_id)
        gv1 = self.conv1.sample_site_gates(h, ctx)
        gv2 = self.conv2.sample_site_gates(h, ctx)
        z = F.relu_(self.bn1[key](self.conv1.conv(h)))
        z = _apply_gate(z, gv1)
        z = self.bn2[key](self.conv2.conv(z))
        if self.shortcut is not None:
            gvs = self.shortcut.sample_site_gates(h, ctx)
            sc = _apply_gate(self.bns[key](self.shortcut.conv(h)), gvs)
            ctx.records.append(GateRecord(-1, gvs, tuple(sc.shape[1:])))
        else:
            sc = h
        out = _apply_gate(F.relu_(z + sc), gv2)
        ctx.records.append(GateRecord(-1, gv1, tuple(out.shape[1:])))
        ctx.records.append(GateRecord(-1, gv2, tuple(out.shape[1:])))
        return out

    def mac_activity(self, active_in: torch.Tensor, unit_records: list[GateRecord]):
        # Record order matches forward_stream: [shortcut?], gv1, gv2.
        if self.shortcut is not None:
            gvs, gv1, gv2 = (r.gates.hard for r in unit_records)
        else:
            gv1, gv2 = (r.gates.hard for r in unit_records)
        a1 = gv1.sum(dim=1)
        a2 = gv2.sum(dim=1)
        acts = [(active_in, a1), (a1, a2)]
        if self.shortcut is not None:
            acts.append((active_in, (gvs * gv2).sum(dim=1)))
        return acts, a2


@dataclass
class ArchSpec:
    """Static architecture description, embedded in checkpoints."""

    kind: str = "simple_cnn"
    in_channels: int = 1
    image_hw: tuple[int, int] = (28, 28)
    num_layers: int = 3
    filters: int = 100
    kernel_size: int = 3

    @classmethod
    def simple_cnn(cls) -> 'ArchSpec':
        return cls()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "in_channels": self.in_channels,
                "image_hw": list(self.image_hw), "num_layers": self.num_layers,
                "filters": self.filters, "kernel_size": self.kernel_size}

    @classmethod
    def from_dict(cls, d: dict) -> 'ArchSpec':
        return cls(kind=d["kind"], in_channels=d["in_channels"],
                   image_hw=tuple(d["image_hw"]), num_layers=d["num_layers"],
                   filters=d["filters"], kernel_size=d["kernel_size"])


class ContinualGatedNet(nn.Module):
    """Shared gated backbone plus one linear head per task.

    Tasks are registered before training and become immutable at
    consolidation. Evaluation forwards are pure functions of (parameters,
    input); training-mode gate sampling draws from the supplied generator.
    """

    def __init__(self, arch: ArchSpec, generator: torch.Generator | None = None,
                 units: list[nn.Module] | None = None):
        super().__init__()
        self.arch = arch
        if units is not None:
            self.units = nn.ModuleList(units)
        elif arch.kind == "simple_cnn":
            self.units = nn.ModuleList(self._build_simple_cnn(arch, generator))
        else:
            raise ConfigError(f"unknown architecture kind {arch.kind!r}")
        self.heads = nn.ModuleDict()
        self.task_classes: dict[int, int] = {}
        self.consolidated: set[int] = set()
        self.task_classifier: nn.Module | None = None
        self.feature_width = self.units[-1].sites()[-1].out_channels

    @staticmethod
    def _build_simple_cnn(arch: ArchSpec, generator):
        units = []
        c_in = arch.in_channels
        hw = arch.image_hw
        for i in range(arch.num_layers):
            pool = i < arch.num_layers - 1  # every conv but the last pools
            unit = SimpleConvUnit(c_in, arch.filters, pool, hw, generator)
            hw = unit.out_hw
            c_in = arch.filters
            units.append(unit)
        return units

    def sites(self) -> list[GatedConv]:
        out = []
        for unit in self.units:
            out.extend(unit.sites())
        return out

    def known_tasks(self) -> list[int]:
        return sorted(self.task_classes)

    def register_task(self, task_id: int, num_classes: int,
                      generator: torch.Generator | None = None):
        if task_id in self.task_classes:
            raise ConfigError(f"task {task_id} already registered")
        for unit in self.units:
            for site in unit.sites():
                site.register_task(task_id, generator)
            if hasattr(unit, "register_task"):
                unit.register_task(task_id, generator)
        head = nn.Linear(self.feature_width, num_classes)
        if generator is not None:
            init_linear_(head, generator)
        self.heads[str(task_id)] = head
        self.task_classes[task_id] = num_classes

    def head(self, task_id: int) -> nn.Linear:
        key = str(task_id)
        if key not in self.heads:
            raise ConfigError(f"unknown task id {task_id}")
        return self.heads[key]

    def forward_stream(self, x: torch.Tensor, task_id: int,
                       gate_mode: str = "eval",
                       generator: torch.Generator | None = None,
                       strict_mask: bool = True,
                       tau: float = DEFAULT_TAU,
                       collect: bool = False):
        """Run one task's gated stream; returns (final map, gate records)."""
        if task_id not in self.task_classes:
            raise ConfigError(f"unknown task id {task_id}")
        ctx = StreamContext(task_id=task_id, gate_mode=gate_mode,
                            generator=generator, strict_mask=strict_mask,
                            tau=tau)
        h = x.contiguous(memory_format=torch.channels_last)
        for unit in self.units:
            h = unit.forward_stream(h, ctx)
        for i, rec in enumerate(ctx.records):
            rec.site_index = i
        return h, ctx.records if collect else []

    def features_from_map(self, final_map: torch.Tensor) -> torch.Tensor:
        return final_map.mean(dim=(2, 3))

    def forward_multihead(self, x: torch.Tensor, task_id: int,
                          gate_mode: str = "eval",
                          generator: torch.Generator | None = None,
                          strict_mask: bool = True,
                          collect: bool = False):
        """Class logits for `task_id` through that task's gated stream."""
        final_map, records = self.forward_stream(
            x, task_id, gate_mode, generator, strict_mask, collect=collect)
        feats = self.features_from_map(final_map)
        logits = head_forward(feats, self.head(task_id))
        if collect:
            return logits, records, feats
        return logits

    def trainable_task_modules(self, task_id: int) -> list[nn.Module]:
        mods: list[nn.Module] = [self.head(task_id)]
        for site in self.sites():
            mods.append(site.gate_module(task_id))
        for unit in self.units:
            for dname in ("bn1", "bn2", "bns"):
                d = getattr(unit, dname, None)
                if d is not None and str(task_id) in d:
                    mods.append(d[str(task_id)])
        return mods


def head_forward(features: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Affine map from pooled features to class logits."""
    if features.shape[-1] != head.in_features:
        raise GatingError(
            f"feature width {features.shape[-1]} does not match head input "
            f"width {head.in_features}")
    return head(features)
