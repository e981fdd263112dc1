import numpy as np
import pytest

from qedg.io.datasets import probe_grid, two_moons
from qedg.nets import NetworkSpec, TrainConfig, train_target


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar f at float64 x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.fixture(scope="session")
def moons():
    return two_moons(n_train=1000, n_test=1000, noise=0.1, seed=3)


@pytest.fixture(scope="session")
def moons_target(moons):
    res = train_target(moons, NetworkSpec("target", 2, 2, (32, 32), seed=7), 200, TrainConfig(seed=7))
    return res


@pytest.fixture(scope="session")
def moons_grid(moons):
    return probe_grid(moons, 50)


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
