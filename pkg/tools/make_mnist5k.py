"""Write the 5000-image MNIST subset bundled with mlxtend as IDX files.

    python tools/make_mnist5k.py OUTDIR [--train 4000]
"""

import argparse
from pathlib import Path

import numpy as np

from bireal.io import write_idx


def export(outdir, n_train=4000, seed=0):
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    order = np.random.default_rng(seed).permutation(len(y))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte", x[:n_train])
    write_idx(out / "train-labels-idx1-ubyte", y[:n_train])
    write_idx(out / "t10k-images-idx3-ubyte", x[n_train:])
    write_idx(out / "t10k-labels-idx1-ubyte", y[n_train:])
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("outdir")
    ap.add_argument("--train", type=int, default=4000)
    args = ap.parse_args()
    print(export(args.outdir, args.train))
