import numpy as np
import pytest

from lsvi_lab.mdp_core import embed_tabular, make_simplex_mdp, rng_stream


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_tabular(S, A, H, seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(S), size=(H, S, A))
    r = rng.uniform(size=(H, S, A))
    return P, r


@pytest.fixture
def small_tabular():
    P, r = random_tabular(3, 2, 3, 7)
    return embed_tabular(P, r, 3)


@pytest.fixture
def small_simplex():
    return make_simplex_mdp(5, 3, 4, 3, rng_stream(3, 0))


_VERDICTS = []


@pytest.fixture
def verdict(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def emit(number, passed, detail):
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        _VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
