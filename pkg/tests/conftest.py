import sys

import numpy as np
import pytest

from bireal.io import load_idx_dir, synthetic_blobs, write_idx


def export_mnist5k(outdir, n_train=4000, seed=0):
    """The 5000-image MNIST subset shipped with mlxtend, as IDX files."""
    mlx = pytest.importorskip("mlxtend.data")
    x, y = mlx.mnist_data()
    order = np.random.default_rng(seed).permutation(len(y))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    write_idx(outdir / "train-images-idx3-ubyte", x[:n_train])
    write_idx(outdir / "train-labels-idx1-ubyte", y[:n_train])
    write_idx(outdir / "t10k-images-idx3-ubyte", x[n_train:])
    write_idx(outdir / "t10k-labels-idx1-ubyte", y[n_train:])
    return outdir


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    return export_mnist5k(tmp_path_factory.mktemp("mnist5k"))


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    return load_idx_dir(mnist_dir)


@pytest.fixture
def blobs():
    return synthetic_blobs(classes=4, size=8, n_train=256, n_test=128, spread=0.8, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
