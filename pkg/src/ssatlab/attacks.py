"""Single-step training attacks (Vanilla / RS / N-FGSM) and the PGD evaluator."""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError
from .models import ArchitectureSpec, ParameterSet, forward

METHODS = ("vanilla", "rs", "n")


@dataclass(frozen=True)
class PerturbationConfig:
    """L-infinity budget and post-processing rules of one FGSM variant.

    ``eps`` and ``alpha`` are in pixel units. ``init_width`` is the half-width
    of the uniform start noise as a multiple of ``eps``.
    """

    eps: float
    alpha: float
    init_width: int = 1
    project_delta_to_eps: bool = True
    clip_image_to_range: bool = True
    method: str = "rs"
    unit_delta_detection: bool = False

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigurationError(f"eps must be positive, got {self.eps}")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if self.init_width not in (0, 1, 2):
            raise ConfigurationError(f"init_width must be 0, 1 or 2, got {self.init_width}")

    @classmethod
    def preset(cls, method: str, eps, alpha_mult: float | None = None, **overrides) -> "PerturbationConfig":
        eps = float(Fraction(eps)) if isinstance(eps, (str, Fraction)) else float(eps)
        if method == "vanilla":
            cfg = cls(eps, 1.0 * eps, 0, False, True, "vanilla")
        elif method == "rs":
            cfg = cls(eps, 1.25 * eps, 1, True, True, "rs")
        elif method == "n":
            cfg = cls(eps, 1.0 * eps, 2, False, False, "n")
        else:
            raise ConfigurationError(f"unknown FGSM method {method!r}; known: {METHODS}")
        if alpha_mult is not None:
            cfg = replace(cfg, alpha=alpha_mult * eps)
        return replace(cfg, **overrides) if overrides else cfg


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_init(config: PerturbationConfig, shape, seed) -> np.ndarray:
    """Uniform start noise on [-w*eps, w*eps]; exactly zero when w = 0."""
    rng = _rng(seed)
    if config.init_width == 0:
        return np.zeros(shape)
    bound = config.init_width * config.eps
    return rng.uniform(-bound, bound, size=shape)


def _loss_and_input_grad(params, spec, x_in: np.ndarray, labels):
    """Per-sample losses/logits at ``x_in`` plus the input gradient of the batch-mean loss.

    The returned logits and losses keep their parameter history, so a later
    loss can reuse this forward pass instead of recomputing it.
    """
    x_leaf = Tensor(x_in, requires_grad=True)
    logits = forward(params, spec, x_leaf)
    losses = ad.softmax_cross_entropy(logits, labels)
    (grad,) = ad.mean(losses).backward(wrt=[x_leaf])
    return logits, losses, grad


def fgsm_step(params: ParameterSet, spec: ArchitectureSpec, x, eta, y, config: PerturbationConfig) -> np.ndarray:
    """alpha * sign(grad of mean CE at x + eta); a constant array."""
    _, _, grad = _loss_and_input_grad(params, spec, np.asarray(x) + eta, y)
    return config.alpha * np.sign(grad)


@dataclass
class CraftedBatch:
    x_clean: np.ndarray
    eta: np.ndarray
    delta: np.ndarray
    x_adv: np.ndarray
    labels: np.ndarray
    logits_before: Tensor  # at x + eta
    loss_before: Tensor
    logits_after: Tensor  # at the detection point (x_adv unless unit-delta detection)
    loss_after: Tensor
    logits_adv: Tensor  # at x_adv, the training point
    loss_adv: Tensor


def postprocess(x: np.ndarray, eta: np.ndarray, delta: np.ndarray, config: PerturbationConfig) -> np.ndarray:
    """Combine start noise and step according to the method's projection and clipping flags."""
    offset = eta + delta
    if config.project_delta_to_eps:
        offset = np.clip(offset, -config.eps, config.eps)
    out = x + offset
    if config.clip_image_to_range:
        out = np.clip(out, 0.0, 1.0)
    return out


def craft(params: ParameterSet, spec: ArchitectureSpec, x, y, config: PerturbationConfig, seed) -> CraftedBatch:
    """One single-step adversarial batch with losses/logits at both ends of the step.

    When image clipping is on, the start point ``x + eta`` is clipped into
    [0, 1] as well and ``eta`` is stored after that clipping.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    eta = sample_init(config, x.shape, seed)
    if config.clip_image_to_range and config.init_width:
        eta = np.clip(x + eta, 0.0, 1.0) - x
    logits_before, loss_before, grad = _loss_and_input_grad(params, spec, x + eta, y)
    direction = np.sign(grad)
    delta = config.alpha * direction
    x_adv = postprocess(x, eta, delta, config)
    logits_adv = forward(params, spec, x_adv)
    loss_adv = ad.softmax_cross_entropy(logits_adv, y)
    if config.unit_delta_detection:
        logits_after = forward(params, spec, x + eta + direction)
        loss_after = ad.softmax_cross_entropy(logits_after, y)
    else:
        logits_after, loss_after = logits_adv, loss_adv
    return CraftedBatch(x, eta, delta, x_adv, y, logits_before, loss_before,
                        logits_after, loss_after, logits_adv, loss_adv)


# -- PGD evaluation -----------------------------------------------------------


@dataclass
class PGDResult:
    attacked: np.ndarray  # per-sample success mask (OR over restarts)
    adv_loss: np.ndarray  # per-sample worst loss over restarts
    x_adv: np.ndarray  # final point of the restart with the highest loss

    @property
    def robust_accuracy(self) -> float:
        return 1.0 - float(self.attacked.mean())


def _predict(params, spec, x) -> tuple[np.ndarray, np.ndarray]:
    logits = forward(params, spec, x).data
    return logits.argmax(axis=1), logits


def pgd_attack(params: ParameterSet, spec: ArchitectureSpec, x, y, eps: float, alpha: float,
               steps: int, restarts: int, seed=0, zero_init: bool = False,
               track_intermediate: bool = False, init_delta=None, step_hook=None) -> PGDResult:
    """Untargeted L-infinity PGD with random restarts.

    Restart ``r`` draws its start from ``default_rng([seed, r])`` so the first
    ``r`` restarts are shared between runs that differ only in ``restarts``.
    A sample counts as attacked if the final iterate of any restart is
    misclassified (or any iterate, with ``track_intermediate``). ``init_delta``
    fixes the start of every restart instead of drawing it.
    """
    if steps < 1 or restarts < 1:
        raise ConfigurationError(f"PGD needs steps >= 1 and restarts >= 1, got {steps}, {restarts}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    eps = float(eps)
    attacked = np.zeros(len(y), dtype=bool)
    best_loss = np.full(len(y), -np.inf)
    best_x = x.copy()
    for r in range(restarts):
        rng = np.random.default_rng([int(seed), r])
        if init_delta is not None:
            delta = np.clip(np.asarray(init_delta, dtype=np.float64), -eps, eps)
        elif zero_init:
            delta = np.zeros_like(x)
        else:
            delta = rng.uniform(-eps, eps, size=x.shape)
        delta = np.clip(x + delta, 0.0, 1.0) - x
        for _ in range(steps):
            x_leaf = Tensor(x + delta, requires_grad=True)
            logits = forward(params, spec, x_leaf)
            loss = ad.mean(ad.softmax_cross_entropy(logits, y))
            if track_intermediate:
                attacked |= logits.data.argmax(axis=1) != y
            (grad,) = loss.backward(wrt=[x_leaf])
            delta = np.clip(delta + alpha * np.sign(grad), -eps, eps)
            delta = np.clip(x + delta, 0.0, 1.0) - x
            if step_hook is not None:
                step_hook(x, delta)
        x_final = x + delta
        logits = forward(params, spec, x_final)
        losses = ad.softmax_cross_entropy(logits, y).data
        attacked |= logits.data.argmax(axis=1) != y
        better = losses > best_loss
        best_loss = np.where(better, losses, best_loss)
        best_x[better] = x_final[better]
    return PGDResult(attacked, best_loss, best_x)
