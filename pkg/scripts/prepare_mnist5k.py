"""Convert the 5000-digit MNIST sample shipped with mlxtend into gzip IDX files.

The sample holds 500 digits per class. The first 400 of each class become the
training split and the remaining 100 the test split. Run once; the outputs
are committed under data/mnist-5k/ so nothing at test time needs mlxtend.

    python3 scripts/prepare_mnist5k.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from ssatlab.data import write_idx


def main(out_dir="data/mnist-5k"):
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = x.reshape(-1, 28, 28).astype(np.uint8)
    train = np.concatenate([np.flatnonzero(y == c)[:400] for c in range(10)])
    test = np.setdiff1d(np.arange(len(y)), train)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", out / "train-labels-idx1-ubyte.gz", x[train], y[train])
    write_idx(out / "t10k-images-idx3-ubyte.gz", out / "t10k-labels-idx1-ubyte.gz", x[test], y[test])
    print(f"wrote {len(train)} train / {len(test)} test digits to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
