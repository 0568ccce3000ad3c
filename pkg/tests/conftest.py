import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rfcrpo.cli import RunConfig, train_base_model
from rfcrpo.numkit import Rng
from rfcrpo.synthdata import rings_task
from rfcrpo.vectorfield import ModelConfig, init_params

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def task():
    return rings_task()


@pytest.fixture(scope="session")
def trained_base(task):
    """Base model from the default run config at seed 0 (about 3 s to train)."""
    params, losses = train_base_model(RunConfig(seed=0), task)
    return params, losses


@pytest.fixture
def small_params():
    cfg = ModelConfig(data_dim=2, num_conditions=3, hidden_dims=(8,), embed_dim=3, time_features=2)
    return init_params(cfg, Rng(7))


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
