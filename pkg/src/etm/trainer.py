"""Continual adaptation loop: per-domain memories, alternating adversarial updates, distillation."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import losses
from .config import TrainConfig
from .data import IGNORE_INDEX, DomainDataset, batch_iterator
from .losses import LossBundle
from .metrics import RunHistory, confusion_matrix, miou
from .models import (Discriminator, SegNet, TargetMemory, TmStore, attach, check_tm_budget,
                     discriminator_forward, generator_groups, seeded, segnet_forward,
                     tm_pair_init, tm_forward)
from .nn_core import AdamState, ParameterGroup, SgdState, adam_step, sgd_step, zero_grads

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# seed streams
_NET, _TM, _DISC, _SRC_BATCH, _TGT_BATCH, _SRC_ONLY_BATCH = range(6)


def new_segnet(cfg: TrainConfig) -> SegNet:
    with seeded(derive_seed(cfg.seed, _NET)):
        return SegNet(cfg.num_classes, cfg.channels, cfg.head_width)


def new_discriminators(cfg: TrainConfig, domain_index: int):
    with seeded(derive_seed(cfg.seed, _DISC, domain_index)):
        return (Discriminator(cfg.num_classes, cfg.disc_width),
                Discriminator(cfg.num_classes, cfg.disc_width))


def new_tm_pair(cfg: TrainConfig, net: SegNet, domain_index: int):
    pair = tm_pair_init(net, domain_index, derive_seed(cfg.seed, _TM, domain_index),
                        cfg.tm_init_scale, cfg.tm_conv_branch, cfg.tm_pool_branch)
    check_tm_budget(net, pair)
    return pair


def snapshot_teacher(net: SegNet) -> SegNet:
    teacher = copy.deepcopy(net)
    for p in teacher.parameters():
        p.requires_grad_(False)
        p.grad = None
    teacher.eval()
    return teacher


@dataclass
class ContinualState:
    segnet: SegNet
    tm_store: TmStore = field(default_factory=TmStore)
    current_tms: Optional[Tuple[TargetMemory, TargetMemory]] = None
    current_discs: Optional[Tuple[Discriminator, Discriminator]] = None
    teacher: Optional[SegNet] = None
    domain_index: int = 0
    history: Optional[RunHistory] = None
    sgd: Optional[SgdState] = None
    adam: Optional[Tuple[AdamState, AdamState]] = None
    iteration: int = 0

    def begin_domain(self, cfg: TrainConfig, domain_index: int) -> None:
        """Fresh memories, discriminators and optimizer state; teacher from the second target on."""
        self.domain_index = domain_index
        self.current_tms = new_tm_pair(cfg, self.segnet, domain_index) if cfg.use_tm else None
        self.current_discs = new_discriminators(cfg, domain_index)
        self.teacher = snapshot_teacher(self.segnet) if domain_index > 1 else None
        self.sgd = SgdState(cfg.momentum, cfg.weight_decay)
        self.adam = (AdamState(), AdamState())
        self.iteration = 0

    def end_domain(self) -> None:
        if self.current_tms is not None:
            self.tm_store.put(self.domain_index, self.current_tms)
        self.current_tms = None
        self.current_discs = None
        self.adam = None
        self.sgd = None


def _upsample(logits: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


def _check_finite(value: torch.Tensor, term: str, iteration: int) -> None:
    if not bool(torch.isfinite(value)):
        raise TrainingDivergedError(
            f"non-finite {term} loss at iteration {iteration} ({value.item()})")


def train_domain_step(state: ContinualState, batch_s, batch_t, cfg: TrainConfig) -> LossBundle:
    """One generator update (segnet + current memories) followed by one discriminator update."""
    x_s, y_s = batch_s
    x_t = batch_t[0] if isinstance(batch_t, (tuple, list)) else batch_t
    lw = cfg.loss_weights
    net, tms, discs = state.segnet, state.current_tms, state.current_discs
    distill_active = cfg.distill and state.domain_index > 1 and max(lw.distill) > 0
    if distill_active and state.teacher is None:
        raise RuntimeError(f"domain {state.domain_index} needs a teacher for distillation")
    it = state.iteration
    size = x_s.shape[2:]

    groups = generator_groups(net, state.domain_index, tms)
    zero_grads(groups)
    for d in discs:
        d.requires_grad_(False)

    # generator phase
    fm_s, ft_s, l1_s, l2_s = segnet_forward(net, x_s)
    fm_t, ft_t, l1_t, l2_t = segnet_forward(net, x_t)
    tm1, tm2 = tms if tms is not None else (None, None)
    plus_s = (attach(tm1, fm_s, l1_s), attach(tm2, ft_s, l2_s))
    plus_t = (attach(tm1, fm_t, l1_t), attach(tm2, ft_t, l2_t))
    teacher_logits = None
    if distill_active:
        with torch.no_grad():
            _, _, o1, o2 = segnet_forward(state.teacher, x_s)
        teacher_logits = (o1, o2)

    total = x_s.new_zeros(())
    seg_sum = adv_sum = distill_sum = 0.0
    probs_s, probs_t = [], []
    for n in range(2):
        seg = losses.segmentation_loss(plus_s[n], y_s, IGNORE_INDEX)
        _check_finite(seg, f"seg{n + 1}", it)
        p_s = F.softmax(_upsample(plus_s[n], size), dim=1)
        p_t = F.softmax(_upsample(plus_t[n], size), dim=1)
        probs_s.append(p_s)
        probs_t.append(p_t)
        adv = losses.adversarial_loss(cfg.adv_loss, discriminator_forward(discs[n], p_s),
                                      discriminator_forward(discs[n], p_t), reduction="mean")
        _check_finite(adv, f"adv{n + 1}", it)
        total = total + lw.seg[n] * seg + lw.adv[n] * adv
        seg_sum += seg.item()
        adv_sum += adv.item()
        if distill_active:
            student = (l1_s, l2_s)[n]   # no memory on the distillation path
            dist = losses.distillation_loss(student, teacher_logits[n], lw.temperature)
            _check_finite(dist, f"distill{n + 1}", it)
            total = total + lw.distill[n] * dist
            distill_sum += dist.item()
    _check_finite(total, "generator total", it)
    total.backward()
    for g in groups:
        sgd_step(g, state.sgd, cfg.base_lr_seg)

    # discriminator phase
    disc_sum = 0.0
    for n, d in enumerate(discs):
        d.requires_grad_(True)
        group = ParameterGroup.from_module(f"disc{n + 1}", d)
        zero_grads([group])
        loss_d = losses.discriminator_loss(
            cfg.adv_loss, discriminator_forward(d, probs_s[n].detach()),
            discriminator_forward(d, probs_t[n].detach()), reduction="mean")
        _check_finite(loss_d, f"disc{n + 1}", it)
        loss_d.backward()
        adam_step(group, state.adam[n], cfg.base_lr_disc)
        disc_sum += loss_d.item()

    state.iteration += 1
    return LossBundle(seg=seg_sum, adv=adv_sum, distill=distill_sum, disc=disc_sum,
                      weighted_total_generator=total.item())


@torch.no_grad()
def predict(net: SegNet, tm_pair, images: torch.Tensor, out_size=None) -> torch.Tensor:
    """Arg-max class map of the final (memory-augmented) head, resized to ``out_size``."""
    _, feat_top, _, logits2 = segnet_forward(net, images)
    logits = attach(tm_pair[1] if tm_pair is not None else None, feat_top, logits2)
    logits = _upsample(logits, out_size or images.shape[2:])
    return logits.argmax(dim=1)


def evaluate(net: SegNet, tm_pair, ds: DomainDataset, batch_size: int = 25) -> Tuple[List[float], float]:
    if ds.labels is None:
        raise ValueError(f"evaluation set {ds.name!r} has no labels")
    matrix = np.zeros((ds.num_classes, ds.num_classes), dtype=np.int64)
    was_training = net.training
    net.eval()
    for start in range(0, len(ds), batch_size):
        x = torch.from_numpy(ds.images[start:start + batch_size])
        y = ds.labels[start:start + batch_size]
        pred = predict(net, tm_pair, x, y.shape[1:]).numpy()
        matrix += confusion_matrix(pred, y, ds.num_classes, IGNORE_INDEX)
    net.train(was_training)
    return miou(matrix)


def train_source_only(cfg: TrainConfig, source: DomainDataset, iters: Optional[int] = None,
                      loss_log: Optional[list] = None) -> SegNet:
    """Supervised training on the labelled source domain (both heads, seg loss only)."""
    iters = cfg.source_iters if iters is None else iters
    net = new_segnet(cfg)
    if iters == 0:
        return net
    stream = batch_iterator(source, cfg.source_batch_size, derive_seed(cfg.seed, _SRC_ONLY_BATCH), True)
    sgd = SgdState(cfg.momentum, cfg.weight_decay)
    groups = [ParameterGroup.from_module("segnet", net)]
    lw = cfg.loss_weights
    for it in range(iters):
        x, y = next(stream)
        zero_grads(groups)
        _, _, l1, l2 = segnet_forward(net, x)
        loss = lw.seg[0] * losses.segmentation_loss(l1, y) + lw.seg[1] * losses.segmentation_loss(l2, y)
        _check_finite(loss, "source seg", it)
        loss.backward()
        sgd_step(groups[0], sgd, cfg.source_lr)
        if loss_log is not None:
            loss_log.append(loss.item())
    return net


MetricsSink = Callable[[int, int, str, float], None]


def run_continual(
    cfg: TrainConfig,
    source: DomainDataset,
    targets: Sequence[DomainDataset],
    target_vals: Sequence[DomainDataset],
    *,
    init_net: Optional[SegNet] = None,
    resume: Optional[ContinualState] = None,
    metrics_sink: Optional[MetricsSink] = None,
    on_domain_end: Optional[Callable[[ContinualState], None]] = None,
    loss_sink: Optional[Callable[[int, int, LossBundle], None]] = None,
) -> Tuple[ContinualState, RunHistory]:
    """Adapt to ``targets`` in order, storing one frozen memory pair per domain.

    Without ``init_net`` or ``resume`` the segmentation network starts from
    source-only training (``cfg.source_iters`` steps), which also provides the
    baseline for the gain metric.
    """
    if not targets:
        raise ValueError("at least one target domain is required")
    if len(targets) != len(target_vals):
        raise ValueError("every target needs a validation split")
    names = [t.name for t in targets]

    if resume is not None:
        state = resume
        history = state.history
        if history.domain_names != names:
            raise ValueError(f"resumed history covers {history.domain_names}, not {names}")
    else:
        net = init_net if init_net is not None else train_source_only(cfg, source)
        history = RunHistory(names, method=cfg.method)
        history.source_only_mean = float(np.mean([evaluate(net, None, v)[1] for v in target_vals]))
        state = ContinualState(segnet=net, history=history)

    def record(domain_index: int, iteration: int) -> None:
        for d in range(1, domain_index + 1):
            tm_pair = state.current_tms if d == domain_index else (
                state.tm_store[d] if d in state.tm_store else None)
            value = evaluate(state.segnet, tm_pair, target_vals[d - 1])[1]
            if iteration == cfg.iter_max:
                history.record(domain_index, d, value)
            if metrics_sink is not None:
                metrics_sink(domain_index, iteration, names[d - 1], value)

    start = state.domain_index + 1 if resume is not None else 1
    for i in range(start, len(targets) + 1):
        state.begin_domain(cfg, i)
        src = batch_iterator(source, cfg.batch_size, derive_seed(cfg.seed, _SRC_BATCH, i), True)
        tgt = batch_iterator(targets[i - 1], cfg.batch_size, derive_seed(cfg.seed, _TGT_BATCH, i), False)
        for it in range(1, cfg.iter_max + 1):
            bundle = train_domain_step(state, next(src), next(tgt), cfg)
            if loss_sink is not None:
                loss_sink(i, it, bundle)
            if cfg.eval_every and it % cfg.eval_every == 0 and it != cfg.iter_max:
                record(i, it)
        record(i, cfg.iter_max)
        state.end_domain()
        log.info("finished domain %d (%s)", i, names[i - 1])
        if on_domain_end is not None:
            on_domain_end(state)
    return state, history


def source_only_history(cfg: TrainConfig, net: SegNet, target_vals: Sequence[DomainDataset]) -> RunHistory:
    """History of a fixed network: identical mIoU at every checkpoint."""
    names = [v.name for v in target_vals]
    h = RunHistory(names, method=cfg.method)
    values = [evaluate(net, None, v)[1] for v in target_vals]
    for j in range(1, len(names) + 1):
        for d in range(1, j + 1):
            h.record(j, d, values[d - 1])
    h.source_only_mean = float(np.mean(values))
    return h
