"""Experiment files: a sectioned key = value format, lambda presets, resolution.

A file looks like::

    [attack]
    method = rs
    eps = 64/255

    [train]
    epochs = 20

Every key belongs to exactly one section and unknown keys are rejected with
the line they appear on. Command-line flags override file values.
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, fields, replace
from fractions import Fraction
from pathlib import Path

from .aaer import AAERConfig
from .attacks import PerturbationConfig
from .errors import ConfigurationError, ParseError
from .telemetry import AttackDescriptor
from .trainer import CyclicLR, PiecewiseLR, TrainConfig

# (method, dataset family, eps numerator over 255) -> (lambda1, lambda2, lambda3)
LAMBDA_PRESETS: dict[tuple[str, str, int], tuple[float, float, float]] = {
    ("rs", "cifar10", 8): (1.0, 2.5, 1.5),
    ("rs", "cifar10", 12): (1.0, 5.0, 2.75),
    ("rs", "cifar10", 16): (1.0, 7.0, 3.25),
    ("rs", "cifar10", 32): (1.0, 5.75, 1.5),
    ("rs", "cifar100", 8): (1.0, 3.5, 1.5),
    ("rs", "cifar100", 12): (1.0, 3.5, 2.75),
    ("rs", "cifar100", 16): (1.0, 6.0, 2.25),
    ("rs", "cifar100", 32): (1.0, 5.0, 0.75),
    ("n", "cifar10", 8): (1.0, 1.5, 0.15),
    ("n", "cifar10", 12): (1.0, 5.0, 0.55),
    ("n", "cifar10", 16): (1.0, 8.5, 1.5),
    ("n", "cifar10", 32): (1.0, 2.75, 0.75),
    ("n", "cifar100", 8): (1.0, 1.5, 0.15),
    ("n", "cifar100", 12): (1.0, 3.5, 0.3),
    ("n", "cifar100", 16): (1.0, 6.0, 0.5),
    ("n", "cifar100", 32): (1.0, 3.5, 0.5),
    ("vanilla", "cifar10", 8): (1.0, 5.5, 2.0),
    ("vanilla", "cifar10", 12): (1.0, 6.5, 3.5),
    ("vanilla", "cifar10", 16): (1.0, 7.0, 3.5),
    ("vanilla", "cifar10", 32): (1.0, 4.8, 0.7),
    ("rs", "svhn", 4): (1.0, 0.5, 1.25),
    ("rs", "svhn", 8): (1.0, 0.6, 0.85),
    ("rs", "svhn", 12): (1.0, 0.45, 0.55),
    ("n", "svhn", 4): (1.0, 0.75, 0.25),
    ("n", "svhn", 8): (1.0, 1.0, 1.0),
    ("n", "svhn", 12): (1.0, 1.0, 0.75),
    ("rs", "tiny-imagenet", 8): (1.0, 0.75, 0.15),
    ("n", "tiny-imagenet", 8): (1.0, 0.25, 0.05),
    ("rs", "imagenet100", 8): (1.0, 3.0, 2.5),
    ("n", "imagenet100", 8): (1.0, 1.25, 0.25),
    ("rs", "cifar10-wrn34", 8): (1.0, 4.0, 2.0),
    ("n", "cifar10-wrn34", 8): (1.0, 2.5, 0.6),
    ("rs", "cifar100-wrn34", 8): (1.0, 2.5, 1.0),
    ("n", "cifar100-wrn34", 8): (1.0, 1.0, 0.2),
}

DATASETS = ("mnist", "mnist-5k", "cifar10", "gaussians")
METHODS = ("vanilla", "rs", "n", "pgd-at")
MODES = ("aaer", "plain", "drop-aae")


def parse_eps(raw) -> Fraction | float:
    """'8/255' -> Fraction(8, 255); '0.25' -> 0.25. Must be positive."""
    if isinstance(raw, (Fraction, int, float)) and not isinstance(raw, bool):
        value = raw
    else:
        text = str(raw).strip().strip('"').strip("'")
        try:
            value = Fraction(text) if "/" in text else float(text)
        except (ValueError, ZeroDivisionError):
            raise ConfigurationError(f"cannot read eps {raw!r}; use k/255 or a real number") from None
    if not value > 0:
        raise ConfigurationError(f"eps must be positive, got {raw!r}")
    return value


def format_eps(eps) -> str:
    if isinstance(eps, Fraction):
        return f"{eps.numerator * (255 // eps.denominator)}/255" if 255 % eps.denominator == 0 else str(eps)
    return repr(float(eps))


def resolve_lambdas(method: str, family: str, eps) -> tuple[float, float, float]:
    """Preset (lambda1, lambda2, lambda3) for a method / dataset family / eps triple."""
    eps = parse_eps(eps)
    k = Fraction(eps) * 255
    method = method.lower().replace("-aaer", "")
    key = (method, family.lower(), int(k)) if k.denominator == 1 else None
    if key not in LAMBDA_PRESETS:
        known = ", ".join(f"{m}/{f}/{e}/255" for m, f, e in sorted(LAMBDA_PRESETS))
        raise ConfigurationError(f"no lambda preset for method={method} dataset={family} eps={format_eps(eps)}; "
                                 f"set lambda1/lambda2/lambda3 explicitly. Known presets: {known}")
    return LAMBDA_PRESETS[key]


# -- schema -------------------------------------------------------------------

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean (on/off), got {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in re.split(r"[,\s]+", text.strip()) if t)


def _opt(kind):
    def parse(text):
        return None if text.strip().lower() in ("", "none", "auto") else kind(text)
    parse.__name__ = f"optional {kind.__name__}"
    return parse


def _choice(*options):
    def parse(text):
        value = text.strip().lower()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return value
    parse.__name__ = "choice"
    return parse


# field name -> (section, parser, default); the field name is also the file key
SCHEMA = {
    "dataset": ("data", _choice(*DATASETS), "mnist-5k"),
    "data_dir": ("data", str, "mnist-5k"),
    "eval_subset": ("data", _opt(int), None),
    "arch": ("model", str, "cnn-small"),
    "method": ("attack", _choice(*METHODS), "rs"),
    "eps": ("attack", parse_eps, Fraction(64, 255)),
    "alpha_mult": ("attack", _opt(float), None),
    "unit_delta": ("attack", _bool, False),
    "pgd_at_steps": ("attack", int, 10),
    "mode": ("train", _choice(*MODES), "aaer"),
    "epochs": ("train", int, 20),
    "batch": ("train", int, 128),
    "schedule": ("train", _choice("cyclic", "piecewise"), "cyclic"),
    "lr_max": ("train", float, 0.2),
    "peak_epoch": ("train", _opt(float), None),
    "milestones": ("train", _floats, ()),
    "factors": ("train", _floats, ()),
    "momentum": ("train", float, 0.9),
    "weight_decay": ("train", float, 5e-4),
    "augment": ("train", _bool, False),
    "drop_normalize_by": ("train", _choice("nae", "all"), "nae"),
    "seed": ("train", int, 0),
    "aaer": ("aaer", _bool, True),
    "lambda1": ("aaer", _opt(float), None),
    "lambda2": ("aaer", _opt(float), None),
    "lambda3": ("aaer", _opt(float), None),
    "part_i": ("aaer", _bool, True),
    "part_ii": ("aaer", _bool, True),
    "part_iii": ("aaer", _bool, True),
    "warmup_epochs": ("aaer", float, 0.0),
    "detach_nae_reference": ("aaer", _bool, False),
    "pgd_steps": ("eval", int, 10),
    "pgd_restarts": ("eval", int, 1),
    "eval_every": ("eval", int, 1),
    "probe_every": ("eval", int, 1),
    "probe_size": ("eval", int, 512),
    "track_intermediate": ("eval", _bool, False),
    "out": ("output", str, "runs/default"),
    "ckpt_every": ("output", int, 0),
}
SECTIONS = tuple(dict.fromkeys(section for section, _, _ in SCHEMA.values()))


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: str = "mnist-5k"
    data_dir: str = "mnist-5k"
    eval_subset: int | None = None
    arch: str = "cnn-small"
    method: str = "rs"
    eps: Fraction | float = Fraction(64, 255)
    alpha_mult: float | None = None
    unit_delta: bool = False
    pgd_at_steps: int = 10
    mode: str = "aaer"
    epochs: int = 20
    batch: int = 128
    schedule: str = "cyclic"
    lr_max: float = 0.2
    peak_epoch: float | None = None
    milestones: tuple = ()
    factors: tuple = ()
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = False
    drop_normalize_by: str = "nae"
    seed: int = 0
    aaer: bool = True
    lambda1: float | None = None
    lambda2: float | None = None
    lambda3: float | None = None
    part_i: bool = True
    part_ii: bool = True
    part_iii: bool = True
    warmup_epochs: float = 0.0
    detach_nae_reference: bool = False
    pgd_steps: int = 10
    pgd_restarts: int = 1
    eval_every: int = 1
    probe_every: int = 1
    probe_size: int = 512
    track_intermediate: bool = False
    out: str = "runs/default"
    ckpt_every: int = 0

    # -- derived objects ----------------------------------------------------

    @property
    def eps_value(self) -> float:
        return float(self.eps)

    @property
    def aaer_active(self) -> bool:
        return self.aaer and self.mode == "aaer" and self.method != "pgd-at"

    def perturbation(self) -> PerturbationConfig:
        method = "rs" if self.method == "pgd-at" else self.method
        return PerturbationConfig.preset(method, self.eps, self.alpha_mult, unit_delta_detection=self.unit_delta)

    def aaer_config(self) -> AAERConfig | None:
        if not self.aaer_active:
            return None
        return AAERConfig(self.lambda1, self.lambda2, self.lambda3, self.part_i, self.part_ii, self.part_iii,
                          self.warmup_epochs, self.detach_nae_reference)

    def eval_attack(self) -> AttackDescriptor:
        return AttackDescriptor(self.eps_value, self.pgd_steps, self.pgd_restarts, seed=self.seed,
                                track_intermediate=self.track_intermediate)

    def lr_schedule(self):
        if self.schedule == "cyclic":
            peak = self.epochs / 2 if self.peak_epoch is None else self.peak_epoch
            return CyclicLR(self.lr_max, self.epochs, peak)
        return PiecewiseLR(self.lr_max, self.milestones, self.factors)

    def train_config(self) -> TrainConfig:
        if self.method == "pgd-at":
            mode = "pgd_at"
        elif self.aaer_active:
            mode = "aaer"
        else:
            # mode = aaer with the regulariser switched off is plain training
            mode = "plain" if self.mode == "aaer" else self.mode.replace("-", "_")
        return TrainConfig(epochs=self.epochs, batch_size=self.batch, momentum=self.momentum,
                           weight_decay=self.weight_decay, schedule=self.lr_schedule(),
                           attack=self.perturbation(), aaer=self.aaer_config(), mode=mode,
                           pgd_steps=self.pgd_at_steps, seed=self.seed, augment=self.augment,
                           drop_normalize_by=self.drop_normalize_by, eval_attack=self.eval_attack(),
                           eval_every=self.eval_every, eval_subset=self.eval_subset)

    def data_path(self) -> Path:
        path = Path(self.data_dir)
        if path.is_absolute():
            return path
        return Path(os.environ.get("SSAT_DATA_DIR", "data")) / path

    # -- serialisation --------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for name, (sec, _, _) in SCHEMA.items():
                if sec == section:
                    lines.append(f"{name} = {_render(getattr(self, name))}" if name != "eps"
                                 else f"eps = {format_eps(self.eps)}")
            lines.append("")
        return "\n".join(lines)

    def resolved(self) -> "ExperimentSpec":
        """Fill lambda presets when the regulariser is active and validate everything."""
        spec = self
        if spec.aaer_active and None in (spec.lambda1, spec.lambda2, spec.lambda3):
            family = "cifar10" if spec.dataset == "cifar10" else spec.dataset
            preset = resolve_lambdas(spec.method, family, spec.eps)
            spec = replace(spec, **{f"lambda{i + 1}": v if getattr(spec, f"lambda{i + 1}") is None
                                    else getattr(spec, f"lambda{i + 1}") for i, v in enumerate(preset)})
        spec.train_config()  # raises on inconsistent training settings
        return spec


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


assert [f.name for f in fields(ExperimentSpec)] == list(SCHEMA)


# -- parsing ------------------------------------------------------------------


def _key_lines(text: str) -> dict:
    """(section, key) -> 1-based line number, found by a plain scan; key None marks the header."""
    where, section = {}, None
    for number, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        head = re.match(r"\[([^\]]+)\]", stripped)
        if head:
            section = head.group(1).strip().lower()
            where.setdefault((section, None), number)
        elif stripped and stripped[0] not in "#;":
            key = re.split(r"[=:]", stripped, maxsplit=1)[0].strip().lower()
            where.setdefault((section, key), number)
    return where


def _convert(name: str, raw: str, origin: str, line: int | None):
    _, parser, _ = SCHEMA[name]
    try:
        return parser(raw.strip().strip('"').strip("'"))
    except (ValueError, ConfigurationError) as exc:
        raise ParseError(f"{origin}: bad value for {name!r}: {exc}", line=line, key=name) from None


def parse_text(text: str, origin: str = "<config>") -> dict:
    """Parse config text into {field: value} for the keys present."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=origin)
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError(f"{origin}: key outside any [section]", line=exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ParseError(f"{origin}: duplicate key {exc.option!r}", line=exc.lineno, key=exc.option) from None
    except configparser.DuplicateSectionError as exc:
        raise ParseError(f"{origin}: duplicate section [{exc.section}]", line=exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ParseError(f"{origin}: malformed line", line=line) from None
    lines = _key_lines(text)
    values = {}
    for section in cp.sections():
        if section.lower() not in SECTIONS:
            number = lines.get((section.lower(), None))
            raise ParseError(f"{origin}: unknown section [{section}]; known: {', '.join(SECTIONS)}",
                             line=number, key=section)
        for key, raw in cp.items(section):
            line = lines.get((section.lower(), key))
            if key not in SCHEMA or SCHEMA[key][0] != section.lower():
                hint = f" (belongs in [{SCHEMA[key][0]}])" if key in SCHEMA else ""
                raise ParseError(f"{origin}: unknown key {key!r} in [{section}]{hint}", line=line, key=key)
            values[key] = _convert(key, raw, origin, line)
    return values


def parse_config(path=None, overrides: dict | None = None, text: str | None = None) -> ExperimentSpec:
    """File values, then flag overrides ({field: raw string or value}), then presets."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    if text is not None:
        values.update(parse_text(text, str(path) if path is not None else "<config>"))
    for name, raw in (overrides or {}).items():
        if raw is None:
            continue
        if name not in SCHEMA:
            raise ParseError(f"unknown override {name!r}", key=name)
        values[name] = _convert(name, raw, "command line", None) if isinstance(raw, str) else raw
    return ExperimentSpec(**values).resolved()


def write_spec(spec: ExperimentSpec, path) -> None:
    Path(path).write_text(spec.to_text())
