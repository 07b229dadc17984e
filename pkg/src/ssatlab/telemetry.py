"""Evaluation, AAE statistics, catastrophic-overfitting detection and metric files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .aaer import AAEPartition
from .attacks import pgd_attack
from .errors import ConfigurationError, SSATError
from .models import ArchitectureSpec, ParameterSet, forward

METRICS_HEADER = ("epoch,nat_acc,rob_acc,attack,aae_count,aae_frac,dce_nae,dce_aae,dce_all,"
                  "l2_nae,l2_aae,l2_all,aaer_loss,ce_loss,lr,seconds").split(",")
PROBE_HEADER = ["iter", "aae_count", "probe_rob_acc"]


@dataclass(frozen=True)
class AttackDescriptor:
    """PGD-steps-restarts under an L-infinity ball; alpha defaults to eps/4."""

    eps: float
    steps: int = 10
    restarts: int = 1
    alpha: float | None = None
    seed: int = 0
    zero_init: bool = False
    track_intermediate: bool = False

    @property
    def step_size(self) -> float:
        return self.eps / 4 if self.alpha is None else self.alpha

    @property
    def name(self) -> str:
        return f"pgd-{self.steps}-{self.restarts}"


def evaluate(params: ParameterSet, spec: ArchitectureSpec, dataset, attack: AttackDescriptor | None = None,
             batch_size: int = 500) -> float:
    """Natural accuracy, or robust accuracy under ``attack``."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        if attack is None or attack.eps == 0:
            pred = forward(params, spec, x).data.argmax(axis=1)
            correct += int((pred == y).sum())
        else:
            res = pgd_attack(params, spec, x, y, attack.eps, attack.step_size, attack.steps,
                             attack.restarts, seed=attack.seed + start,
                             zero_init=attack.zero_init, track_intermediate=attack.track_intermediate)
            correct += int((~res.attacked).sum())
    return correct / len(dataset)


# -- per-epoch metrics ---------------------------------------------------------


@dataclass
class MetricsRecord:
    epoch: int
    nat_acc: float
    rob_acc: float
    attack: str
    aae_count: int
    aae_frac: float
    dce_nae: float
    dce_aae: float
    dce_all: float
    l2_nae: float
    l2_aae: float
    l2_all: float
    aaer_loss: float
    ce_loss: float
    lr: float
    seconds: float


class EpochAccumulator:
    """Sums per-sample statistics over an epoch so group means come out exact."""

    def __init__(self):
        self.samples = 0
        self.aae = 0
        self.batches = 0
        self.sums = dict.fromkeys(("dce_aae", "dce_nae", "l2_aae", "l2_nae"), 0.0)
        self.ce = 0.0
        self.aaer = 0.0

    def add(self, loss_before, loss_after, logits_before, logits_after, part: AAEPartition,
            ce_value: float = 0.0, aaer_value: float = 0.0) -> None:
        dce = np.asarray(loss_after) - np.asarray(loss_before)
        shift = np.asarray(logits_after) - np.asarray(logits_before)
        l2 = (shift.reshape(len(shift), -1) ** 2).sum(axis=1)
        mask = part.aae_mask
        self.sums["dce_aae"] += float(dce[mask].sum())
        self.sums["dce_nae"] += float(dce[~mask].sum())
        self.sums["l2_aae"] += float(l2[mask].sum())
        self.sums["l2_nae"] += float(l2[~mask].sum())
        self.samples += part.m
        self.aae += part.n
        self.batches += 1
        self.ce += ce_value
        self.aaer += aaer_value

    def add_batch(self, crafted, part, ce_value, aaer_value) -> None:
        self.add(crafted.loss_before.data, crafted.loss_after.data, crafted.logits_before.data,
                 crafted.logits_after.data, part, ce_value, aaer_value)

    def record(self, epoch, nat_acc, rob_acc, attack, lr, seconds) -> MetricsRecord:
        s, n = self.samples, self.aae
        nae = s - n

        def div(a, b):
            return a / b if b else 0.0

        return MetricsRecord(
            epoch=epoch, nat_acc=nat_acc, rob_acc=rob_acc, attack=attack, aae_count=n,
            aae_frac=div(n, s),
            dce_nae=div(self.sums["dce_nae"], nae), dce_aae=div(self.sums["dce_aae"], n),
            dce_all=div(self.sums["dce_nae"] + self.sums["dce_aae"], s),
            l2_nae=div(self.sums["l2_nae"], nae), l2_aae=div(self.sums["l2_aae"], n),
            l2_all=div(self.sums["l2_nae"] + self.sums["l2_aae"], s),
            aaer_loss=div(self.aaer, self.batches), ce_loss=div(self.ce, self.batches),
            lr=lr, seconds=seconds)


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_metrics(records: Iterable[MetricsRecord], sink, jsonl=None) -> None:
    """Write the metrics CSV (17 significant digits) and optionally a JSONL mirror."""
    records = list(records)
    try:
        with open(sink, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for rec in records:
                writer.writerow([_fmt(getattr(rec, name)) for name in METRICS_HEADER])
        if jsonl is not None:
            with open(jsonl, "w") as fh:
                for rec in records:
                    fh.write(json.dumps(asdict(rec)) + "\n")
    except OSError as exc:
        raise SSATError(f"cannot write metrics to {exc.filename}: {exc.strerror}") from exc


def read_metrics(path) -> list[MetricsRecord]:
    types = {f.name: f.type for f in fields(MetricsRecord)}
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != METRICS_HEADER:
                raise ConfigurationError(f"{path}: unexpected metrics header")
            out = []
            for row in reader:
                values = {}
                for name, raw in zip(header, row):
                    kind = types[name]
                    values[name] = int(raw) if kind == "int" else raw if kind == "str" else float(raw)
                out.append(MetricsRecord(**values))
            return out
    except OSError as exc:
        raise SSATError(f"cannot read metrics from {path}: {exc.strerror}") from exc


# -- catastrophic overfitting ----------------------------------------------------


@dataclass(frozen=True)
class CoVerdict:
    detected: bool
    onset_epoch: int | None
    peak: float
    trough: float


def detect_co(robust: Sequence[float], window: int = 3, floor: float = 0.05, drop: float = 0.20) -> CoVerdict:
    """Flag a collapse: running peak minus current >= drop, current <= floor,
    and at most ``window`` epochs after the epoch that set the peak."""
    acc = [float(a) for a in robust]
    if len(acc) < 2:
        raise ConfigurationError("detect_co needs at least two epochs")
    peak, peak_epoch = -math.inf, 0
    for epoch, value in enumerate(acc):
        if value > peak:
            peak, peak_epoch = value, epoch
            continue
        if peak - value >= drop and value <= floor and epoch - peak_epoch <= window:
            return CoVerdict(True, epoch, peak, min(acc[peak_epoch:]))
    top = int(np.argmax(acc))
    return CoVerdict(False, None, acc[top], min(acc[top:]))


# -- loss surface ------------------------------------------------------------------


def surface_directions(params, spec, x, y, eps: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Axis a: eps * sign(input gradient). Axis b: eps * random +-1 pattern."""
    x = np.asarray(x, dtype=np.float64)[None]
    leaf = ad.Tensor(x, requires_grad=True)
    loss = ad.mean(ad.softmax_cross_entropy(forward(params, spec, leaf), [int(y)]))
    (grad,) = loss.backward(wrt=[leaf])
    rng = np.random.default_rng(seed)
    return eps * np.sign(grad[0]), eps * rng.choice([-1.0, 1.0], size=x.shape[1:])


def grid_coefficients(radius: float, resolution: int) -> np.ndarray:
    i = np.arange(resolution)
    # exact 0 at the centre for odd resolutions
    return radius * (2 * i - (resolution - 1)) / (resolution - 1)


def loss_surface_grid(params, spec, x, y, dir_a, dir_b, radius: float = 1.0, resolution: int = 41,
                      batch_size: int = 512) -> np.ndarray:
    """grid[i, j] = loss(x + a_i * dir_a + b_j * dir_b) over a symmetric lattice."""
    if resolution < 2:
        raise ConfigurationError(f"resolution must be >= 2, got {resolution}")
    x = np.asarray(x, dtype=np.float64)
    coeffs = grid_coefficients(radius, resolution)
    a, b = np.meshgrid(coeffs, coeffs, indexing="ij")
    a, b = a.reshape(-1), b.reshape(-1)
    out = np.empty(a.size)
    for s in range(0, a.size, batch_size):
        ca, cb = a[s:s + batch_size], b[s:s + batch_size]
        pts = x[None] + ca.reshape((-1,) + (1,) * x.ndim) * dir_a + cb.reshape((-1,) + (1,) * x.ndim) * dir_b
        logits = forward(params, spec, pts)
        out[s:s + batch_size] = ad.softmax_cross_entropy(logits, np.full(len(ca), int(y))).data
    return out.reshape(resolution, resolution)


def write_grid(grid: np.ndarray, coeffs: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        fh.write("# axis_a " + " ".join(_fmt(float(c)) for c in coeffs) + "\n")
        fh.write("# axis_b " + " ".join(_fmt(float(c)) for c in coeffs) + "\n")
        for row in grid:
            fh.write(",".join(_fmt(float(v)) for v in row) + "\n")


# -- per-iteration probe -------------------------------------------------------------


class IterationProbe:
    """Trainer hook: after every ``every``-th step, robust accuracy on a fixed subset.

    The subset indices are drawn once at construction and never change.
    """

    def __init__(self, params_spec: ArchitectureSpec, dataset, attack: AttackDescriptor,
                 size: int = 512, every: int = 1, seed: int = 0):
        rng = np.random.default_rng(seed)
        size = min(size, len(dataset))
        self.indices = np.sort(rng.choice(len(dataset), size=size, replace=False))
        self.subset = dataset.subset(self.indices)
        self.spec = params_spec
        self.attack = attack
        self.every = max(int(every), 1)
        self.rows: list[tuple[int, int, float]] = []
        self._pending = 0

    def __call__(self, outcome, params) -> None:
        self._pending += outcome.partition.n
        if (outcome.iteration + 1) % self.every:
            return
        rob = evaluate(params, self.spec, self.subset, self.attack)
        self.rows.append((outcome.iteration, self._pending, rob))
        self._pending = 0

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(PROBE_HEADER)
            for it, count, rob in self.rows:
                writer.writerow([it, count, _fmt(float(rob))])
