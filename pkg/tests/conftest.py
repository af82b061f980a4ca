import numpy as np
import pytest

from aadkta.dataset import SyntheticConfig, generate_synthetic
from aadkta.training import TrainConfig, train_model

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(number, ok, detail):
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(SyntheticConfig(n_students=40, steps_per_student=30), seed=3)


@pytest.fixture(scope="session")
def small_config():
    return TrainConfig(d_k=8, d_h=12, K_clusters=3, epochs=2, learning_rate=0.05)


@pytest.fixture(scope="session")
def trained_small(small_data, small_config):
    catalog, records = small_data
    return train_model(small_config, catalog, records)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
