import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("relmap", deadline=None, print_blob=True)
settings.load_profile("relmap")

ROOT = Path(__file__).resolve().parents[1]
os.environ.setdefault("RELMAP_DATA_DIR", str(ROOT / "data" / "mnist"))


def mnist_available() -> bool:
    root = Path(os.environ["RELMAP_DATA_DIR"])
    return any(root.glob("train-images*")) and any(root.glob("t10k-labels*"))


@pytest.fixture(scope="session")
def mnist():
    if not mnist_available():
        pytest.skip("MNIST IDX files not found; run scripts/fetch_mnist.py or set RELMAP_DATA_DIR")
    from relmap import data

    return data.load_mnist()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str]] = {}
CRITERIA = 10


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, passed, detail)`` records one acceptance verdict for the summary."""

    def record(n, passed, detail):
        ACCEPTANCE[n] = ("PASS" if passed else "FAIL", detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid for key, rs in terminalreporter.stats.items()
              if key != "deselected" for r in rs if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, CRITERIA + 1):
        verdict, detail = ACCEPTANCE.get(n, ("FAIL", "not evaluated (skipped or errored)"))
        terminalreporter.write_line(f"criterion {n:>2}: {verdict}  {detail}")
