"""Per-task channel gates: logit MLPs, stochastic binary sampling, and the
sparsity objective.

A gate module maps the (spatially pooled) input of a convolutional layer to one
logit per output channel. During training the binary on/off decision is sampled
with logistic noise (binary-concrete reparameterization), so each gate fires
with probability sigmoid(logit). The hard threshold is used in the forward pass
and a tempered sigmoid supplies the gradient (straight-through).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, GatingError

# Backward-pass temperature of the sigmoid relaxation.
DEFAULT_TAU = 2.0 / 3.0

GATE_HIDDEN_UNITS = 16


def _logistic_noise(shape, generator, dtype=torch.float32):
    # Logistic(0,1) via inverse CDF; u clamped into the open interval so the
    # log transform stays finite.
    u = torch.rand(shape, generator=generator, dtype=dtype)
    u = u.clamp(1e-7, 1.0 - 1e-7)
    return torch.log(u) - torch.log1p(-u)


class GateModule(nn.Module):
    """Produces per-channel gate logits for one layer and one task.

    Architecture: Linear(in, 16) -> BatchNorm1d(16) -> ReLU -> Linear(16, out).
    Once the owning task is consolidated the module is frozen: parameters stop
    receiving gradients and batch-norm statistics stop updating.
    """

    def __init__(self, task_id: int, in_channels: int, out_channels: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.task_id = task_id
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.fc1 = nn.Linear(in_channels, GATE_HIDDEN_UNITS)
        self.bn = nn.BatchNorm1d(GATE_HIDDEN_UNITS)
        self.fc2 = nn.Linear(GATE_HIDDEN_UNITS, out_channels)
        self.frozen = False
        if generator is not None:
            init_linear_(self.fc1, generator)
            init_linear_(self.fc2, generator)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def freeze(self):
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # A frozen module never re-enters training mode; this keeps its
        # batch-norm running statistics fixed no matter what the parent does.
        if self.frozen:
            return super().train(False)
        return super().train(mode)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        if pooled.dim() != 2 or pooled.shape[1] != self.in_channels:
            raise GatingError(
                f"gate input has shape {tuple(pooled.shape)}, expected "
                f"(batch, {self.in_channels})")
        if not torch.isfinite(pooled).all():
            raise GatingError("gate input contains non-finite values")
        h = torch.relu(self.bn(self.fc1(pooled)))
        return self.fc2(h)


def init_linear_(lin: nn.Linear, generator: torch.Generator):
    """Default linear init (uniform +-1/sqrt(fan_in)) from an explicit RNG."""
    bound = 1.0 / (lin.weight.shape[1] ** 0.5)
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=generator)
        if lin.bias is not None:
            lin.bias.uniform_(-bound, bound, generator=generator)


class BinaryGateFunction(torch.autograd.Function):
    """Hard threshold forward, tempered-sigmoid backward.

    `z` is logits plus realized logistic noise (or raw logits in eval mode).
    With soft=True the forward returns sigmoid(z/tau) instead of the hard
    step; the backward is identical, which makes the surrogate gradient
    verifiable against finite differences of the soft path.
    """

    @staticmethod
    def forward(ctx, z, tau, soft):
        ctx.save_for_backward(z)
        ctx.tau = tau
        if soft:
            return torch.sigmoid(z / tau)
        return (z > 0).to(z.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (z,) = ctx.saved_tensors
        s = torch.sigmoid(z / ctx.tau)
        return grad_out * s * (1.0 - s) / ctx.tau, None, None


@dataclass
class GateVector:
    """Realized gate decisions for one layer / one task / one batch.

    `values` carries the straight-through autograd link when produced in a
    training forward; `noise` is None in eval mode.
    """

    values: torch.Tensor
    logits: torch.Tensor
    noise: torch.Tensor | None = None

    def __post_init__(self):
        if self.values.shape != self.logits.shape:
            raise GatingError("gate values/logits shape mismatch")

    @property
    def hard(self) -> torch.Tensor:
        return self.values.detach()

    def active_fraction(self) -> float:
        return float(self.values.detach().mean())


def sample_gates(logits: torch.Tensor, mode: str,
                 generator: torch.Generator | None = None,
                 tau: float = DEFAULT_TAU) -> GateVector:
    """Draw binary gates from logits.

    train: g = 1[logit + L > 0], L ~ Logistic(0,1), so P(g=1) = sigmoid(logit).
    eval:  g = 1[logit > 0], deterministic. Ties at exactly zero resolve to 0.
    soft:  g = sigmoid((logit + L)/tau), the relaxation used to verify the
           straight-through gradient.
    """
    if not torch.isfinite(logits).all():
        raise GatingError("gate logits contain non-finite values")
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if mode == "eval":
        values = BinaryGateFunction.apply(logits, tau, False)
        return GateVector(values=values, logits=logits, noise=None)
    if mode not in ("train", "soft"):
        raise ConfigError(f"unknown gate mode {mode!r}")
    noise = _logistic_noise(logits.shape, generator, dtype=logits.dtype)
    values = BinaryGateFunction.apply(logits + noise, tau, mode == "soft")
    return GateVector(values=values, logits=logits, noise=noise)


def gate_backward(upstream_grad: torch.Tensor, logits: torch.Tensor,
                  noise: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Straight-through gradient of the hard gate w.r.t. its logits.

    Returns upstream * d/dlogit sigmoid((logit + noise)/tau); the derivative
    of the soft relaxation stands in for the non-differentiable threshold.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if upstream_grad.shape != logits.shape or logits.shape != noise.shape:
        raise GatingError("gate_backward argument shapes differ")
    s = torch.sigmoid((logits + noise) / tau)
    return upstream_grad * s * (1.0 - s) / tau


@dataclass
class SparsityConfig:
    """Weight and warm-up delay of the active-gate penalty."""

    lambda_s: float = 0.5
    patience_epochs: int = 20

    def __post_init__(self):
        if self.lambda_s < 0:
            raise ConfigError(f"lambda_s must be >= 0, got {self.lambda_s}")
        if self.patience_epochs < 0:
            raise ConfigError(
                f"patience_epochs must be >= 0, got {self.patience_epochs}")


def sparsity_loss(gate_vectors: list[GateVector], config: SparsityConfig,
                  current_epoch: int) -> torch.Tensor:
    """Mean active-gate fraction across layers, scaled by lambda_s.

    Inactive until `patience_epochs` have elapsed. Gate values enter through
    the straight-through tensors, so the loss value counts hard 0/1 decisions
    while gradients follow the sigmoid relaxation.
    """
    if not gate_vectors:
        raise GatingError("sparsity_loss needs at least one gated layer")
    if current_epoch < config.patience_epochs:
        return torch.zeros((), dtype=gate_vectors[0].values.dtype)
    per_layer = [gv.values.mean() for gv in gate_vectors]
    return config.lambda_s * torch.stack(per_layer).mean()
