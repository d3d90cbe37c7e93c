import os
from pathlib import Path

import numpy as np
import pytest

from ftn._alloc import tune_allocator

tune_allocator()

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = Path(os.environ.get("FTN_DATA_DIR", ROOT / "data" / "mnist"))


def mnist_available() -> bool:
    return all(any((MNIST_DIR / f"{stem}{ext}").exists() for ext in (".gz", ""))
               for stem in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                            "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))


requires_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST IDX files not found in {MNIST_DIR}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
