import numpy as np
import pytest
import torch

from boostnet.model import build_model, make_config


@pytest.fixture
def tiny_config():
    return make_config("multi-exit-mlp", (3,), (6, 5, 4), 3)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture
def tiny_batch():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(16, 3, generator=g, dtype=torch.float64)
    y = torch.randint(0, 3, (16,), generator=g)
    return x, y


@pytest.fixture
def moons():
    from boostnet.data import load_dataset

    return load_dataset("two-moons", seed=0, n_samples=256, noise=0.2)


def logits_for_confidence(c):
    """Two-class logits whose max softmax probability is ``c`` (class 0 wins)."""
    c = np.asarray(c, dtype=np.float64)
    return np.stack([np.log(c / (1 - c)), np.zeros_like(c)], axis=-1)


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
