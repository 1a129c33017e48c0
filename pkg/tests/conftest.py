from pathlib import Path

import numpy as np
import pytest

from onnkit.data import MNIST_FILES, mnist_dir


def mnist_available() -> bool:
    root = mnist_dir()
    return all((Path(root) / f).exists() for pair in MNIST_FILES.values() for f in pair)


needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST IDX files not found (set ONNKIT_MNIST_DIR)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x (x is restored)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
