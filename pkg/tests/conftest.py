import numpy as np
import pytest

from memtrack.config import TrackerConfig, TrainConfig


def micro_config(**kw) -> TrackerConfig:
    base = dict(n_points=16, k_tokens=2, d_model=4, l_mu=1, l_mfr=1, n_heads=1, knn_k=3)
    base.update(kw)
    return TrackerConfig(**base)


def small_config(**kw) -> TrackerConfig:
    base = dict(n_points=64, k_tokens=4, d_model=16, l_mu=2, l_mfr=1, n_heads=4, knn_k=8)
    base.update(kw)
    return TrackerConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(window=3, batch_size=1, epochs=1, steps_per_epoch=5)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
