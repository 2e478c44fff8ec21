"""Parameter groups, the two optimizers used for training, and a gradient checker.

Autodiff itself is delegated to torch; everything here operates on plain
float32 tensors with populated ``.grad`` buffers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn


@dataclass
class ParameterGroup:
    name: str
    tensors: List[torch.Tensor]
    lr_scale: float = 1.0
    names: Optional[List[str]] = None

    def __post_init__(self):
        self.tensors = list(self.tensors)
        if not self.tensors:
            raise ValueError(f"parameter group {self.name!r} is empty")
        if not self.lr_scale > 0:
            raise ValueError(f"lr_scale must be positive, got {self.lr_scale}")
        if self.names is None:
            self.names = [f"{self.name}[{i}]" for i in range(len(self.tensors))]
        elif len(self.names) != len(self.tensors):
            raise ValueError("names and tensors differ in length")

    @classmethod
    def from_module(cls, name: str, module: nn.Module, lr_scale: float = 1.0) -> "ParameterGroup":
        named = list(module.named_parameters())
        return cls(name, [p for _, p in named], lr_scale, [f"{name}.{n}" for n, _ in named])

    def __iter__(self):
        return iter(zip(self.names, self.tensors))


def concat_groups(name: str, *groups: ParameterGroup, lr_scale: float = 1.0) -> ParameterGroup:
    tensors, names = [], []
    for g in groups:
        tensors.extend(g.tensors)
        names.extend(g.names)
    return ParameterGroup(name, tensors, lr_scale, names)


def param_count(params: ParameterGroup) -> int:
    if not params.tensors:
        raise ValueError(f"parameter group {params.name!r} is empty")
    return sum(t.numel() for t in params.tensors)


@dataclass
class SgdState:
    momentum: float = 0.97
    weight_decay: float = 5e-4
    velocity: Dict[Tuple[str, int], torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[Tuple[str, int], torch.Tensor] = field(default_factory=dict)
    v: Dict[Tuple[str, int], torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("Adam eps must be positive")


def _checked_grads(params: ParameterGroup) -> List[torch.Tensor]:
    grads = []
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        if not torch.isfinite(p.grad).all():
            raise FloatingPointError(f"parameter {name} has a non-finite gradient")
        grads.append(p.grad)
    return grads


@torch.no_grad()
def sgd_step(params: ParameterGroup, state: SgdState, base_lr: float) -> None:
    """Momentum SGD: ``v <- mu*v + (g + wd*p)``, ``p <- p - lr*scale*v``.

    All gradients are validated before any tensor is touched, so a failure
    leaves the group unchanged.
    """
    grads = _checked_grads(params)
    lr = base_lr * params.lr_scale
    for i, (p, g) in enumerate(zip(params.tensors, grads)):
        if state.weight_decay:
            g = g + state.weight_decay * p
        key = (params.name, i)
        v = state.velocity.get(key)
        if v is None:
            v = state.velocity[key] = torch.zeros_like(p)
        v.mul_(state.momentum).add_(g)
        p.sub_(lr * v)


@torch.no_grad()
def adam_step(params: ParameterGroup, state: AdamState, base_lr: float) -> None:
    """Bias-corrected Adam. Use one ``AdamState`` per parameter group."""
    grads = _checked_grads(params)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    lr = base_lr * params.lr_scale
    for i, (p, g) in enumerate(zip(params.tensors, grads)):
        key = (params.name, i)
        if key not in state.m:
            state.m[key] = torch.zeros_like(p)
            state.v[key] = torch.zeros_like(p)
        m, v = state.m[key], state.v[key]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.sub_(lr * (m / bc1) / denom)


def zero_grads(groups: Sequence[ParameterGroup]) -> None:
    for g in groups:
        for t in g.tensors:
            t.grad = None


def finite_difference_gradcheck(
    fn: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    h: float = 1e-6,
) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over coordinates.

    Evaluated in float64. ``fn`` must map a tensor to a scalar tensor and be
    smooth in an ``h``-neighbourhood of ``point``.
    """
    x = point.detach().to(torch.float64).clone().requires_grad_(True)
    y = fn(x)
    if not torch.isfinite(y).all():
        raise FloatingPointError("function value is not finite at the check point")
    (analytic,) = torch.autograd.grad(y, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1)

    flat = x.detach().clone().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = fn(flat.view_as(x)).item()
            flat[i] = orig - h
            f_minus = fn(flat.view_as(x)).item()
            flat[i] = orig
            if not (torch.isfinite(torch.tensor(f_plus)) and torch.isfinite(torch.tensor(f_minus))):
                raise FloatingPointError(f"function value is not finite near coordinate {i}")
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
    err = (analytic - numeric).abs() / analytic.abs().clamp(min=1.0)
    return float(err.max()) if err.numel() else 0.0
