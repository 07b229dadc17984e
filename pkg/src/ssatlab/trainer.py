"""Outer minimisation loop: SGD with momentum, LR schedules and training modes."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import aaer as reg
from . import autodiff as ad
from .attacks import CraftedBatch, PerturbationConfig, craft, pgd_attack
from .data import BatchPlan, Dataset, augment, batches
from .errors import ConfigurationError, NumericError
from .models import ArchitectureSpec, ParameterSet, build, forward
from .telemetry import AttackDescriptor, EpochAccumulator, MetricsRecord, evaluate

log = logging.getLogger(__name__)

MODES = ("aaer", "plain", "drop_aae", "pgd_at")


# -- schedules -----------------------------------------------------------------


@dataclass(frozen=True)
class CyclicLR:
    """Triangular schedule: 0 -> max_lr at peak_epoch -> 0 at total_epochs."""

    max_lr: float
    total_epochs: float
    peak_epoch: float

    def __post_init__(self):
        if not 0 < self.peak_epoch < self.total_epochs:
            raise ConfigurationError("cyclic schedule needs 0 < peak_epoch < total_epochs")
        if self.max_lr < 0:
            raise ConfigurationError("learning rates must be nonnegative")


@dataclass(frozen=True)
class PiecewiseLR:
    """initial * product of factors of every milestone already passed."""

    initial: float
    milestones: tuple = ()
    factors: tuple = ()

    def __post_init__(self):
        factors = tuple(self.factors)
        if len(factors) == 1 and len(self.milestones) > 1:
            factors = factors * len(self.milestones)
        if len(factors) != len(self.milestones):
            raise ConfigurationError("piecewise schedule needs one factor per milestone")
        object.__setattr__(self, "milestones", tuple(self.milestones))
        object.__setattr__(self, "factors", factors)
        if self.initial < 0 or any(f < 0 for f in factors):
            raise ConfigurationError("learning rates must be nonnegative")


def lr_at(schedule, epoch_fraction: float) -> float:
    """Learning rate after ``epoch_fraction`` (real-valued) epochs of training."""
    t = float(epoch_fraction)
    if isinstance(schedule, CyclicLR):
        if t <= schedule.peak_epoch:
            return schedule.max_lr * t / schedule.peak_epoch
        rest = schedule.total_epochs - schedule.peak_epoch
        return max(0.0, schedule.max_lr * (schedule.total_epochs - t) / rest)
    rate = schedule.initial
    for milestone, factor in zip(schedule.milestones, schedule.factors):
        if t >= milestone:
            rate *= factor
    return rate


def warmup_scale(epoch: float, warmup_epochs: float) -> float:
    if warmup_epochs <= 0:
        return 1.0
    return min(max(epoch, 0.0) / warmup_epochs, 1.0)


# -- optimiser -----------------------------------------------------------------


@dataclass
class OptimizerState:
    buffers: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ParameterSet) -> "OptimizerState":
        return cls({k: np.zeros_like(v.data) for k, v in params.items()})


def sgd_step(params: ParameterSet, grads: dict, state: OptimizerState, rate: float,
             momentum: float = 0.9, weight_decay: float = 5e-4) -> None:
    """In-place SGD with heavy-ball momentum and coupled L2 decay on every tensor."""
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NumericError(f"non-finite gradient for parameter {name}", node=name)
    for name, tensor in params.items():
        g = grads.get(name)
        g = np.zeros_like(tensor.data) if g is None else g
        g = g + weight_decay * tensor.data
        buf = state.buffers.setdefault(name, np.zeros_like(tensor.data))
        buf *= momentum
        buf += g
        tensor.data = tensor.data - rate * buf
    state.step += 1


# -- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: object = None
    attack: PerturbationConfig = None
    aaer: reg.AAERConfig | None = None
    mode: str = "aaer"
    pgd_steps: int = 10
    seed: int = 0
    augment: bool = False
    drop_normalize_by: str = "nae"  # "nae": divide by m - n, "all": divide by m
    eval_attack: AttackDescriptor | None = None
    eval_every: int = 1
    eval_subset: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; known: {MODES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch size >= 1")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("momentum and weight decay must be nonnegative")
        if self.drop_normalize_by not in ("nae", "all"):
            raise ConfigurationError("drop_normalize_by must be 'nae' or 'all'")
        if self.schedule is None:
            self.schedule = CyclicLR(0.2, max(self.epochs, 1), max(self.epochs, 1) / 2)
        if self.attack is None:
            raise ConfigurationError("TrainConfig needs an attack PerturbationConfig")


@dataclass
class BatchOutcome:
    """What one optimiser step did; handed to per-iteration hooks."""

    epoch: int
    batch: int
    iteration: int
    partition: reg.AAEPartition
    ce_loss: float
    aaer_loss: float
    lr: float


@dataclass
class TrainResult:
    params: ParameterSet
    records: list
    steps: int = 0


def _build_loss(cfg: TrainConfig, crafted, epoch_t: float):
    """Return (total loss tensor, ce value, aaer value, partition) for one batch."""
    part = reg.partition(crafted.loss_before, crafted.loss_after)
    if cfg.mode == "drop_aae":
        keep = part.nae_mask
        denom = (part.m - part.n) if cfg.drop_normalize_by == "nae" else part.m
        if denom == 0:
            ce = ad.scale(ad.sum(crafted.loss_adv), 0.0)
        else:
            ce = ad.sum(ad.mul(crafted.loss_adv, keep / denom))
    else:
        ce = ad.mean(crafted.loss_adv)
    total, aaer_value = ce, 0.0
    if cfg.mode == "aaer" and cfg.aaer is not None:
        scale = warmup_scale(epoch_t, cfg.aaer.warmup_epochs)
        if scale > 0 and (part.n > 0 or not cfg.aaer.part_i):
            term, _ = reg.aaer_loss(cfg.aaer, crafted.loss_before, crafted.loss_after,
                                    crafted.logits_before, crafted.logits_after, part)
            if scale != 1.0:
                term = ad.scale(term, scale)
            if term.requires_grad:
                total = ad.add(ce, term)
            aaer_value = term.item()
    return total, ce.item(), aaer_value, part


def _pgd_crafted(params, spec, x, y, cfg: TrainConfig, seed) -> CraftedBatch:
    """Multi-step inner maximisation (alpha = eps/4) packaged like a crafted batch."""
    eps = cfg.attack.eps
    start = np.clip(x + np.random.default_rng(seed).uniform(-eps, eps, size=x.shape), 0.0, 1.0)
    res = pgd_attack(params, spec, x, y, eps, eps / 4, cfg.pgd_steps, 1, init_delta=start - x)
    logits_before = forward(params, spec, start)
    loss_before = ad.softmax_cross_entropy(logits_before, y)
    logits_adv = forward(params, spec, res.x_adv)
    loss_adv = ad.softmax_cross_entropy(logits_adv, y)
    return CraftedBatch(x, start - x, res.x_adv - start, res.x_adv, y, logits_before, loss_before,
                        logits_adv, loss_adv, logits_adv, loss_adv)


def train(config: TrainConfig, dataset: Dataset, spec: ArchitectureSpec,
          eval_set: Dataset | None = None, params: ParameterSet | None = None,
          hooks: Sequence[Callable[[BatchOutcome, ParameterSet], None]] = (),
          epoch_callback: Callable[[MetricsRecord, ParameterSet], None] | None = None) -> TrainResult:
    """Run adversarial training; one optimiser step per batch, one record per epoch."""
    if tuple(dataset.sample_shape) != spec.input_shape:
        raise ConfigurationError(f"dataset samples {dataset.sample_shape} do not fit {spec.input_shape}")
    params = build(spec, config.seed) if params is None else params
    state = OptimizerState.for_params(params)
    records: list[MetricsRecord] = []
    n_batches = -(-len(dataset) // config.batch_size)
    eval_set = eval_set if eval_set is not None else dataset
    if config.eval_subset is not None and config.eval_subset < len(eval_set):
        # fixed random subset: stored splits are often sorted by class
        pick = np.sort(np.random.default_rng(0).permutation(len(eval_set))[:config.eval_subset])
        eval_set = eval_set.subset(pick)
    iteration = 0

    for epoch in range(config.epochs):
        acc = EpochAccumulator()
        started = time.perf_counter()
        plan = BatchPlan(config.batch_size, config.seed, epoch)
        for k, (x, y, idx) in enumerate(batches(dataset, plan)):
            if config.augment:
                x = augment(x, config.seed, epoch, idx)
            epoch_t = epoch + k / n_batches
            rate = lr_at(config.schedule, epoch + (k + 1) / n_batches)
            seed = [config.seed, epoch, k]
            try:
                if config.mode == "pgd_at":
                    crafted = _pgd_crafted(params, spec, x, y, config, seed)
                else:
                    crafted = craft(params, spec, x, y, config.attack, seed)
                total, ce_value, aaer_value, part = _build_loss(config, crafted, epoch_t)
                grads = dict(zip(params.tensors, total.backward(wrt=list(params.tensors.values()))))
                sgd_step(params, grads, state, rate, config.momentum, config.weight_decay)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {k}: {exc}", node=exc.node) from exc
            acc.add_batch(crafted, part, ce_value, aaer_value)
            outcome = BatchOutcome(epoch, k, iteration, part, ce_value, aaer_value, rate)
            for hook in hooks:
                hook(outcome, params)
            iteration += 1
        seconds = time.perf_counter() - started

        nat = rob = float("nan")
        attack_name = "none"
        if config.eval_every and (epoch + 1) % config.eval_every == 0:
            nat = evaluate(params, spec, eval_set, None)
            if config.eval_attack is not None:
                rob = evaluate(params, spec, eval_set, config.eval_attack)
                attack_name = config.eval_attack.name
        record = acc.record(epoch, nat, rob, attack_name, lr_at(config.schedule, epoch + 1), seconds)
        records.append(record)
        log.info("epoch %d nat %.4f rob %.4f aae %d ce %.4f aaer %.4f (%.1fs)", epoch, nat, rob,
                 record.aae_count, record.ce_loss, record.aaer_loss, seconds)
        if epoch_callback is not None:
            epoch_callback(record, params)
    return TrainResult(params, records, iteration)
