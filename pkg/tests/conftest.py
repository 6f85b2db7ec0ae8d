import os
import warnings

import numpy as np
import pytest

from dynadp.accountants import PrivacyConditionWarning
from dynadp.datasets import Dataset, load_idx, save_idx
from dynadp.model import init_mlp
from dynadp.ndcore import Purpose, RngStream

MNIST_IMAGES = "mnist5k-images-idx3-ubyte"
MNIST_LABELS = "mnist5k-labels-idx1-ubyte"


@pytest.fixture(autouse=True)
def _quiet_condition_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PrivacyConditionWarning)
        yield


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """The 5000-digit MNIST subset bundled with mlxtend, written as IDX files."""
    mlx = pytest.importorskip("mlxtend.data")
    X, y = mlx.mnist_data()
    d = tmp_path_factory.mktemp("mnist5k")
    ds = Dataset(X / 255.0, y.astype(np.int64), 10, feature_shape=(28, 28), name="mnist5k")
    save_idx(ds, d / MNIST_IMAGES, d / MNIST_LABELS)
    return d


@pytest.fixture(scope="session")
def mnist5k(mnist_dir):
    return load_idx(mnist_dir / MNIST_IMAGES, mnist_dir / MNIST_LABELS, name="mnist5k")


@pytest.fixture
def mnist_env(mnist_dir, monkeypatch):
    monkeypatch.setenv("DYNADP_DATA", str(mnist_dir))
    return mnist_dir


@pytest.fixture
def rng():
    return RngStream(1234, Purpose.INIT)


def small_model(sizes=(6, 5, 3), seed=0, activation="relu"):
    return init_mlp(sizes, RngStream(seed, Purpose.INIT), activation)


def small_batch(n=4, d=6, k=3, seed=0):
    g = np.random.default_rng(seed)
    return g.uniform(size=(n, d)), g.integers(0, k, size=n)


def pytest_configure(config):
    os.environ.pop("DYNADP_SEED", None)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
