"""Training objectives: double hinge adversarial pair, cross-entropy, distillation, baselines.

Score-map losses accept a single ``[h, w]`` map or a batch (leading batch
dimension). ``reduction="sum"`` sums over each map and averages over the
batch; ``reduction="mean"`` averages over every score, which keeps loss
weights independent of the discriminator's output resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import torch
import torch.nn.functional as F

ADV_KINDS = ("DHA", "GAN", "GeoGAN")


@dataclass
class LossWeights:
    seg: Tuple[float, float] = (0.1, 1.0)
    adv: Tuple[float, float] = (0.0002, 0.001)
    distill: Tuple[float, float] = (0.02, 0.2)
    temperature: float = 2.0

    def __post_init__(self):
        for name in ("seg", "adv", "distill"):
            values = tuple(float(v) for v in getattr(self, name))
            if len(values) != 2 or min(values) < 0:
                raise ValueError(f"{name} weights must be two non-negative numbers")
            setattr(self, name, values)
        if not self.temperature > 0:
            raise ValueError("distillation temperature must be positive")


@dataclass
class LossBundle:
    seg: float = 0.0
    adv: float = 0.0
    distill: float = 0.0
    disc: float = 0.0
    weighted_total_generator: float = 0.0


def _reduce(values: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return values.mean()
    if reduction == "sum":
        if values.dim() <= 2:
            return values.sum()
        return values.flatten(1).sum(dim=1).mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def dha_discriminator_loss(z_s: torch.Tensor, z_t: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Hinge loss pushing source scores above +1 and target scores below -1."""
    _same_shape(z_s, z_t)
    return _reduce(F.relu(1.0 - z_s) + F.relu(1.0 + z_t), reduction)


def dha_adversarial_loss(z_s: torch.Tensor, z_t: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """``(z_s - z_t)_+``: moves both sides toward each other, inactive once they have crossed."""
    _same_shape(z_s, z_t)
    return _reduce(F.relu(z_s - z_t), reduction)


def segmentation_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int = 255) -> torch.Tensor:
    num_classes = logits.shape[1]
    if logits.shape[2:] != labels.shape[1:]:
        logits = F.interpolate(logits, size=labels.shape[1:], mode="bilinear", align_corners=False)
    labels = labels.long()
    valid = labels != ignore_index
    if not bool(valid.any()):
        raise ValueError("no valid pixels")
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bool(bad.any()):
        raise ValueError(
            f"label value {int(labels[bad][0])} outside [0, {num_classes}) and not ignore_index")
    return F.cross_entropy(logits, labels, ignore_index=ignore_index)


def distillation_loss(logits_new: torch.Tensor, logits_old: torch.Tensor, temperature: float = 2.0) -> torch.Tensor:
    """Cross-entropy between temperature-softened class distributions, averaged per pixel."""
    _same_shape(logits_new, logits_old)
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    target = F.softmax(logits_old / temperature, dim=1)
    log_pred = F.log_softmax(logits_new / temperature, dim=1)
    return -(target * log_pred).sum(dim=1).mean()


def softened_entropy(logits: torch.Tensor, temperature: float = 2.0) -> torch.Tensor:
    return distillation_loss(logits, logits, temperature)


def baseline_adversarial_losses(kind: str, z_s: torch.Tensor, z_t: torch.Tensor,
                                reduction: str = "sum") -> Tuple[torch.Tensor, torch.Tensor]:
    """``(disc_loss, adv_loss)`` for the vanilla GAN or Geometric-GAN objectives."""
    _same_shape(z_s, z_t)
    if kind == "GAN":
        bce = F.binary_cross_entropy_with_logits
        disc = (_reduce(bce(z_s, torch.ones_like(z_s), reduction="none"), reduction)
                + _reduce(bce(z_t, torch.zeros_like(z_t), reduction="none"), reduction))
        adv = _reduce(bce(z_t, torch.ones_like(z_t), reduction="none"), reduction)
        return disc, adv
    if kind == "GeoGAN":
        return dha_discriminator_loss(z_s, z_t, reduction), _reduce(-z_t, reduction)
    raise ValueError(f"unknown adversarial loss kind {kind!r}; expected GAN or GeoGAN")


def adversarial_loss(kind: str, z_s: torch.Tensor, z_t: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Generator-side term for any of the supported kinds."""
    if kind == "DHA":
        return dha_adversarial_loss(z_s, z_t, reduction)
    return baseline_adversarial_losses(kind, z_s, z_t, reduction)[1]


def discriminator_loss(kind: str, z_s: torch.Tensor, z_t: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    if kind == "DHA":
        return dha_discriminator_loss(z_s, z_t, reduction)
    return baseline_adversarial_losses(kind, z_s, z_t, reduction)[0]
