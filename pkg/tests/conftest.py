import os
from pathlib import Path

import numpy as np
import pytest

from ssatlab import autodiff as ad
from ssatlab.models import ArchitectureSpec, Conv, Dense, Flatten, MaxPool, ReLU, build

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "data" / "mnist-5k"
CONFIGS = ROOT / "configs"


@pytest.fixture(autouse=True, scope="session")
def _data_root():
    os.environ.setdefault("SSAT_DATA_DIR", str(ROOT / "data"))


def tiny_mlp(inp=6, hidden=5, classes=3):
    return ArchitectureSpec((Flatten(), Dense(inp, hidden), ReLU(), Dense(hidden, classes)),
                            (1, 1, inp), classes, "tiny-mlp")


def tiny_cnn(channels=1, size=6, classes=3):
    # 6x6 -conv3-> 4x4 -pool-> 2x2
    return ArchitectureSpec((Conv(channels, 2, 3), ReLU(), MaxPool(), Flatten(), Dense(8, classes)),
                            (channels, size, size), classes, "tiny-cnn")


def linear_model(inp, classes):
    return ArchitectureSpec((Flatten(), Dense(inp, classes)), (1, 1, inp), classes, "linear")


def random_params(spec, rng):
    return build(spec, int(rng.integers(0, 2**31)))


def leaf(rng, *shape, scale=1.0):
    return ad.Tensor(scale * rng.standard_normal(shape), requires_grad=True)
