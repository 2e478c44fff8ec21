"""Segmentation network, target-specific memory modules and patch discriminators."""
from __future__ import annotations

import contextlib
from typing import Dict, Iterator, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .nn_core import ParameterGroup, concat_groups, param_count

TM_PARAM_BUDGET = 0.05


class ConfigurationError(ValueError):
    pass


@contextlib.contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block with the global torch RNG seeded, restoring it afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class ASPPLite(nn.Module):
    """Two parallel 3x3 convolutions (dilation 1 and 4), summed, then a 1x1 classifier."""

    def __init__(self, in_channels: int, num_classes: int, width: int = 32):
        super().__init__()
        self.local = nn.Conv2d(in_channels, width, 3, padding=1, dilation=1)
        self.context = nn.Conv2d(in_channels, width, 3, padding=4, dilation=4)
        self.classifier = nn.Conv2d(width, num_classes, 1)

    def forward(self, x):
        return self.classifier(F.relu(self.local(x) + self.context(x)))


class SegNet(nn.Module):
    """Four-block conv encoder with classifier heads on the stride-4 and stride-8 features."""

    def __init__(self, num_classes: int = 4, channels: Sequence[int] = (32, 64, 128, 128),
                 head_width: int = 32):
        super().__init__()
        if len(channels) != 4:
            raise ConfigurationError("the encoder has exactly four blocks")
        self.num_classes = num_classes
        strides = (1, 2, 2, 2)
        blocks, c_prev = [], 3
        for c, s in zip(channels, strides):
            blocks.append(nn.Conv2d(c_prev, c, 3, stride=s, padding=1))
            c_prev = c
        self.encoder = nn.ModuleList(blocks)
        self.c_mid = channels[2]
        self.c_top = channels[3]
        self.strides = (4, 8)
        self.head1 = ASPPLite(self.c_mid, num_classes, head_width)
        self.head2 = ASPPLite(self.c_top, num_classes, head_width)

    def forward(self, x):
        return segnet_forward(self, x)


def segnet_forward(net: SegNet, x: torch.Tensor):
    """Return ``(feat_mid, feat_top, logits1, logits2)``."""
    stride = net.strides[-1]
    if x.dim() != 4 or x.shape[1] != 3:
        raise ConfigurationError(f"expected a [B,3,H,W] batch, got {tuple(x.shape)}")
    if x.shape[2] % stride or x.shape[3] % stride:
        raise ConfigurationError(
            f"input size {tuple(x.shape[2:])} is not divisible by the network stride {stride}")
    h = x
    feats = []
    for conv in net.encoder:
        h = F.relu(conv(h))
        feats.append(h)
    feat_mid, feat_top = feats[2], feats[3]
    return feat_mid, feat_top, net.head1(feat_mid), net.head2(feat_top)


class TargetMemory(nn.Module):
    """Per-domain additive memory: a 1x1 conv branch plus a pooled-context branch."""

    def __init__(self, c_in: int, c_out: int, domain_index: int,
                 conv_branch: bool = True, pool_branch: bool = True):
        super().__init__()
        if c_in < 1 or c_out < 1:
            raise ConfigurationError("TM channel counts must be positive")
        if not (conv_branch or pool_branch):
            raise ConfigurationError("a TM needs at least one branch")
        self.c_in, self.c_out = c_in, c_out
        self.domain_index = domain_index
        self.conv = nn.Conv2d(c_in, c_out, 1) if conv_branch else None
        self.pool_conv = nn.Conv2d(c_in, c_out, 1) if pool_branch else None
        self.frozen = False

    def freeze(self) -> "TargetMemory":
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.frozen = True
        return self

    def forward(self, h_prev):
        return tm_forward(self, h_prev)


def tm_forward(tm: TargetMemory, h_prev: torch.Tensor) -> torch.Tensor:
    if h_prev.shape[1] != tm.c_in:
        raise ConfigurationError(
            f"TM expects {tm.c_in} input channels, got {h_prev.shape[1]}")
    out = None
    if tm.conv is not None:
        out = tm.conv(h_prev)
    if tm.pool_conv is not None:
        pooled = F.relu(tm.pool_conv(h_prev.mean(dim=(2, 3), keepdim=True)))
        pooled = F.interpolate(pooled, size=h_prev.shape[2:], mode="nearest")
        out = pooled if out is None else out + pooled
    return out


def attach(tm: Optional[TargetMemory], feat: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Head output plus the memory's response to the head's input feature map."""
    if tm is None:
        return logits
    if tm.c_out != logits.shape[1]:
        raise ConfigurationError(f"TM emits {tm.c_out} channels, head has {logits.shape[1]}")
    return logits + tm_forward(tm, feat)


def fused_forward(net: SegNet, tm1: Optional[TargetMemory], tm2: Optional[TargetMemory],
                  x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Both head outputs with their memories added; ``plus2`` is the final prediction."""
    feat_mid, feat_top, logits1, logits2 = segnet_forward(net, x)
    return attach(tm1, feat_mid, logits1), attach(tm2, feat_top, logits2)


def tm_init(c_in: int, c_out: int, domain_index: int, seed: int, scale: float = 0.01,
            conv_branch: bool = True, pool_branch: bool = True) -> TargetMemory:
    tm = TargetMemory(c_in, c_out, domain_index, conv_branch, pool_branch)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for conv in (tm.conv, tm.pool_conv):
            if conv is None:
                continue
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * scale)
            conv.bias.zero_()
    return tm


def tm_pair_init(net: SegNet, domain_index: int, seed: int, scale: float = 0.01,
                 conv_branch: bool = True, pool_branch: bool = True):
    return (
        tm_init(net.c_mid, net.num_classes, domain_index, seed * 2 + 0, scale, conv_branch, pool_branch),
        tm_init(net.c_top, net.num_classes, domain_index, seed * 2 + 1, scale, conv_branch, pool_branch),
    )


def check_tm_budget(net: SegNet, tm_pair) -> float:
    ratio = (sum(param_count(ParameterGroup.from_module("tm", tm)) for tm in tm_pair)
             / param_count(ParameterGroup.from_module("segnet", net)))
    if ratio >= TM_PARAM_BUDGET:
        raise ConfigurationError(
            f"TM pair holds {ratio:.3f} of the segmentation network's parameters "
            f"(limit {TM_PARAM_BUDGET})")
    return ratio


class Discriminator(nn.Module):
    """Fully convolutional patch scorer; raw (unsquashed) outputs."""

    def __init__(self, num_classes: int = 4, ndf: int = 16):
        super().__init__()
        self.num_classes = num_classes
        widths = (ndf, ndf * 2, ndf * 4, ndf * 8)
        layers, c_prev = [], num_classes
        for w in widths:
            layers.append(nn.Conv2d(c_prev, w, 4, stride=2, padding=1))
            c_prev = w
        self.convs = nn.ModuleList(layers)
        self.score = nn.Conv2d(c_prev, 1, 3, padding=1)

    def forward(self, p):
        return discriminator_forward(self, p)


def discriminator_forward(d: Discriminator, p: torch.Tensor) -> torch.Tensor:
    if p.shape[1] != d.num_classes:
        raise ConfigurationError(
            f"discriminator expects {d.num_classes} channels, got {p.shape[1]}")
    h = p
    for conv in d.convs:
        h = F.leaky_relu(conv(h), 0.2)
    return d.score(h)


class TmStore:
    """Frozen memory pairs of every finished domain, keyed by domain index."""

    def __init__(self):
        self._pairs: Dict[int, Tuple[TargetMemory, TargetMemory]] = {}

    def put(self, domain_index: int, pair) -> None:
        if domain_index in self._pairs:
            raise KeyError(f"domain {domain_index} already stored")
        for tm in pair:
            tm.freeze()
        self._pairs[domain_index] = tuple(pair)

    def __getitem__(self, domain_index: int):
        return self._pairs[domain_index]

    def __contains__(self, domain_index: int) -> bool:
        return domain_index in self._pairs

    def __len__(self) -> int:
        return len(self._pairs)

    def domains(self):
        return sorted(self._pairs)

    def items(self):
        return sorted(self._pairs.items())


def generator_groups(net: SegNet, domain_index: int, tm_pair=None):
    """SGD groups for one domain: encoder, both heads, and the active memories.

    Heads run at a tenth of the base rate after the first target domain; the
    encoder always runs at a tenth of the heads' rate.
    """
    head_scale = 1.0 if domain_index <= 1 else 0.1
    groups = [
        ParameterGroup.from_module("encoder", net.encoder, 0.1 * head_scale),
        ParameterGroup.from_module("head1", net.head1, head_scale),
        ParameterGroup.from_module("head2", net.head2, head_scale),
    ]
    if tm_pair is not None:
        groups.append(concat_groups(
            f"tm{domain_index}",
            ParameterGroup.from_module(f"tm{domain_index}_1", tm_pair[0]),
            ParameterGroup.from_module(f"tm{domain_index}_2", tm_pair[1]),
            lr_scale=1.0,
        ))
    return groups
