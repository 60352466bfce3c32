import sys

import numpy as np
import pytest

from plasmodesim.datamodel import BINARY, CONTINUOUS, Dataset, SourceDataset, TruthSet


def make_dataset(w, a, y, columns=None, kind=None):
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w.reshape(-1, 1)
    columns = columns or tuple(f"W{j + 1}" for j in range(w.shape[1]))
    y = np.asarray(y, dtype=float)
    if kind is None:
        kind = BINARY if np.all((y == 0) | (y == 1)) else CONTINUOUS
    return Dataset(w, columns, np.asarray(a, dtype=float), y, kind)


def as_source(d, truths=None):
    return SourceDataset(d, "fixture", 0, truths or TruthSet(0.0, 0.0, 0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
