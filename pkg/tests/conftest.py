import struct

import numpy as np
import pytest

from prslab.data import Dataset
from prslab.nn import LayerSpec, Model, mlp


def numerical_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f at x (float64), one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def brute_force_patterns(features: np.ndarray) -> list[tuple]:
    """Distinct sign patterns by O(N^2) pairwise comparison; no hashing or sorting."""
    signs = [tuple(int(v > 0) for v in row) for row in np.asarray(features)]
    distinct = []
    for i, s in enumerate(signs):
        if not any(signs[j] == s for j in range(i)):
            distinct.append(s)
    return distinct


def write_idx_images(path, images: np.ndarray):
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 8, 3]))
        for d in (n, h, w):
            fh.write(d.to_bytes(4, "big"))
        fh.write(bytes(int(v) for v in images.ravel()))


def write_idx_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, 8, 1))
        fh.write(struct.pack(">I", len(labels)))
        fh.write(bytes(int(v) for v in labels))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset(rng):
    x = rng.uniform(0, 1, size=(40, 1, 1, 6)).astype(np.float64)
    y = np.arange(40) % 3
    return Dataset(x, y.astype(np.int64), num_classes=3)


@pytest.fixture
def tiny_model():
    return Model(mlp([8, 5], 3), (1, 1, 6), seed=7, dtype=np.float64)


def dense_model(weights, biases, input_dim, activations=None, dtype=np.float64) -> Model:
    """MLP with given (fan_in, out) weight matrices."""
    acts = activations or ["relu"] * (len(weights) - 1) + ["none"]
    specs = [LayerSpec("flatten")] + [LayerSpec("dense", out=w.shape[1], activation=a)
                                      for w, a in zip(weights, acts)]
    m = Model(specs, (1, 1, input_dim), dtype=dtype)
    arrays = []
    for w, b in zip(weights, biases):
        arrays += [np.asarray(w, dtype=dtype), np.asarray(b, dtype=dtype)]
    m.load_state_arrays(arrays)
    return m


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
