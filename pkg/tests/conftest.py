import numpy as np
import pytest

from ctds.energies import GaussianMixtureTarget, GaussianOracle, GaussianSource, PathSpec
from ctds.models import build_models

SMALL_FEATURES = {"x": (8, 0.3), "t": (4, 1.0), "temp": (4, 1.0)}


@pytest.fixture
def oracle():
    return GaussianOracle(1.0, 2.0, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_mixture():
    """Six broad modes near the origin: smooth enough for finite differences."""
    return GaussianMixtureTarget.gmm40(0, n_modes=6, box=3.0, std=0.8)


def small_models(continuum=False, learned=False, seed=0, width=16):
    return build_models(2, GaussianSource(5.0, 2), continuum=continuum, learned=learned, width=width,
                        depth=3, features=SMALL_FEATURES, seed=seed)


def small_path(models, target, kind):
    return PathSpec(kind, models.free_energy.source, target, models.correction)


def central_diff(f, x, h=1e-5):
    """Central-difference derivative of ``f`` along every coordinate of the 1-D array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = {}


def record_acceptance(number, status, text):
    line = f"criterion {number:>2}: {status:<4} {text}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
