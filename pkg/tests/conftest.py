import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def random_mask(rng, max_size=32):
    """Random blobby mask with at least one tumor and one background pixel."""
    while True:
        h, w = rng.integers(3, max_size + 1, size=2)
        m = rng.uniform(size=(h, w)) < rng.uniform(0.1, 0.7)
        if m.any() and not m.all():
            return m.astype(np.uint8)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
