import numpy as np
import pytest

from uqsim.datagen import Dataset
from uqsim.mathstat import make_stream

BOSTON_COLUMNS = ["CRIM", "ZN", "INDUS", "CHAS", "NOX", "RM", "AGE", "DIS", "RAD", "TAX",
                  "PTRATIO", "B", "LSTAT"]


def boston_like(seed: int = 0, n: int = 506) -> Dataset:
    """Synthetic stand-in with the shape and rough scales of the Boston housing table."""
    rng = make_stream(seed, 77)
    X = np.column_stack([
        rng.exponential(3.6, n),
        rng.choice([0.0, 12.5, 25.0, 80.0], size=n, p=[0.73, 0.1, 0.1, 0.07]),
        rng.uniform(0.5, 27.7, n),
        (rng.random(n) < 0.07).astype(float),
        rng.uniform(0.39, 0.87, n),
        rng.normal(6.28, 0.7, n),
        rng.uniform(3, 100, n),
        rng.gamma(3.0, 1.3, n),
        rng.choice([1.0, 4.0, 5.0, 24.0], size=n),
        rng.uniform(190, 710, n),
        rng.normal(18.5, 2.2, n),
        396.9 - rng.exponential(20, n),
        rng.gamma(3.0, 4.2, n),
    ])
    rm, lstat, nox, crim = X[:, 5], X[:, 12], X[:, 4], X[:, 0]
    f = 22.5 + 6.5 * (rm - 6.28) - 0.55 * (lstat - 12.6) + 0.02 * (lstat - 12.6) ** 2 - 8 * (nox - 0.55)
    sd = 2.0 + 0.12 * lstat + 0.1 * crim
    y = np.clip(f + sd * rng.standard_normal(n), 5.0, 50.0)
    return Dataset(X, y, list(BOSTON_COLUMNS))


@pytest.fixture(scope="session")
def boston_surrogate():
    return boston_like()


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
