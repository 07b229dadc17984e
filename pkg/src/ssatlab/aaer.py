"""Abnormal adversarial examples: partition, regularizer terms and diagnostics.

A training sample is *abnormal* when its loss strictly drops along the
single-step perturbation meant to increase it. The regularizer penalises the
fraction of such samples times (a) their loss drop and (b) how far their logit
displacement exceeds that of the normal samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, UsageError


@dataclass(frozen=True)
class AAEPartition:
    aae_mask: np.ndarray
    n: int
    m: int

    @property
    def nae_mask(self) -> np.ndarray:
        return ~self.aae_mask


@dataclass(frozen=True)
class AAERConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    part_i: bool = True  # count weighting n/m
    part_ii: bool = True  # loss-drop term
    part_iii: bool = True  # constrained logit variation
    warmup_epochs: float = 0.0
    detach_nae_reference: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "warmup_epochs"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def partition(loss_before, loss_after) -> AAEPartition:
    """Abnormal iff loss_before > loss_after, strictly; ties are normal."""
    before, after = _values(loss_before), _values(loss_after)
    if before.shape != after.shape:
        raise UsageError(f"loss vectors differ in length: {before.shape} vs {after.shape}")
    mask = before > after
    return AAEPartition(mask, int(mask.sum()), int(mask.size))


def _group_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``values`` over ``mask``; the constant 0 for an empty group."""
    count = int(mask.sum())
    if count == 0:
        return Tensor(0.0, op="empty-group")
    return ad.sum(ad.mul(values, mask / count))


def aae_ce(loss_before, loss_after, part: AAEPartition) -> Tensor:
    """Mean loss drop over abnormal samples, differentiable through both losses."""
    drop = ad.sub(ad.as_tensor(loss_before), ad.as_tensor(loss_after))
    return _group_mean(drop, part.aae_mask)


def logit_variation(logits_before, logits_after, part: AAEPartition,
                    detach_nae_reference: bool = False) -> tuple[Tensor, Tensor]:
    """Mean squared L2 logit displacement over abnormal and over normal samples."""
    dist = ad.sq_l2_diff(ad.as_tensor(logits_after), ad.as_tensor(logits_before))
    aae_l2 = _group_mean(dist, part.aae_mask)
    nae_l2 = _group_mean(dist, part.nae_mask)
    if detach_nae_reference:
        nae_l2 = nae_l2.detach()
    return aae_l2, nae_l2


def constrained_variation(aae_l2, nae_l2) -> Tensor:
    """Hinge max(AAE_L2 - NAE_L2, 0)."""
    return ad.relu(ad.sub(ad.as_tensor(aae_l2), ad.as_tensor(nae_l2)))


def aaer(config: AAERConfig, part: AAEPartition, aae_ce_value, cv_value) -> Tensor:
    """(lambda1 * n/m) * (lambda2 * AAE_CE + lambda3 * CV), with ablation switches.

    n/m enters as a plain number, so no gradient flows through the count.
    """
    if part.n == 0 and config.part_i:
        return Tensor(0.0, op="aaer-empty")
    weight = config.lambda1 * (part.n / part.m if config.part_i else 1.0)
    terms = []
    if config.part_ii:
        terms.append(ad.scale(aae_ce_value, config.lambda2))
    if config.part_iii:
        terms.append(ad.scale(cv_value, config.lambda3))
    if not terms:
        return Tensor(0.0, op="aaer-empty")
    inner = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return ad.scale(inner, weight)


def aaer_loss(config: AAERConfig, loss_before, loss_after, logits_before, logits_after,
              part: AAEPartition | None = None) -> tuple[Tensor, AAEPartition]:
    """Convenience composition of the whole regularizer for one batch."""
    if part is None:
        part = partition(loss_before, loss_after)
    ce = aae_ce(loss_before, loss_after, part)
    a, b = logit_variation(logits_before, logits_after, part, config.detach_nae_reference)
    return aaer(config, part, ce, constrained_variation(a, b)), part


@dataclass(frozen=True)
class VariationStats:
    dce_nae: float
    dce_aae: float
    dce_all: float
    l2_nae: float
    l2_aae: float
    l2_all: float
    n: int = 0
    m: int = 0


def variation_stats(loss_before, loss_after, logits_before, logits_after, part: AAEPartition) -> VariationStats:
    """Group means of the loss change (after - before) and of the squared logit shift."""
    dce = _values(loss_after) - _values(loss_before)
    shift = _values(logits_after) - _values(logits_before)
    l2 = (shift.reshape(len(shift), -1) ** 2).sum(axis=1)

    def mean_over(v, mask):
        return float(v[mask].mean()) if mask.any() else 0.0

    aae, nae = part.aae_mask, part.nae_mask
    return VariationStats(mean_over(dce, nae), mean_over(dce, aae), float(dce.mean()),
                          mean_over(l2, nae), mean_over(l2, aae), float(l2.mean()), part.n, part.m)
