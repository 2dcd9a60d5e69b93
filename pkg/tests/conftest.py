import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fitv2.blocks import FiTv2, ModelConfig  # noqa: E402
from fitv2.flow import TimestepSampler, TrainConfig, train_loop  # noqa: E402
from fitv2.pipeline import DatasetSpec, TokenDataset, synth_dataset  # noqa: E402

TINY = dict(layers=2, hidden=48, heads=4, patch=2, in_channels=4, max_tokens=64, num_classes=4)


@pytest.fixture(scope="session")
def toy_spec():
    return DatasetSpec(num_samples=256, seed=0)


@pytest.fixture(scope="session")
def toy_dataset(toy_spec):
    return TokenDataset.from_samples(synth_dataset(toy_spec), 64, 2)


@pytest.fixture(scope="session")
def trained_tiny(toy_dataset):
    """A small model after a short training run, shared across tests (read-only)."""
    model = FiTv2(ModelConfig(**TINY), seed=0)
    state = train_loop(model, toy_dataset, TrainConfig(batch_size=8, lr=2e-3, warmup=10), TimestepSampler(), 150, seed=0)
    return model, state


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k.rstrip("abcd"))):
            terminalreporter.write_line(ACCEPTANCE[key])
