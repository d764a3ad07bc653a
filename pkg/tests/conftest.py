import numpy as np
import pytest

from ttsbeam.channel import ChannelSample

# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {msg}")


def complex_normal(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_sample(rng):
    """Single unstructured channel draw with M=3, N=4, K=2."""
    M, N, K = 3, 4, 2
    return ChannelSample(complex_normal(rng, N, M), complex_normal(rng, K, N), complex_normal(rng, K, M),
                         np.full(K, 0.1))
