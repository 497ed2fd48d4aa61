"""Shared fixtures. Trained models are session-scoped because training
dominates the suite's run time."""

import numpy as np
import pytest

from eemax import chanmodel, oracle, trainer

# Desk-scale setting shared by the training-based checks.
DESK_PMAX = 1.0  # W; interference-limited enough that the optimum is nontrivial
LOW_PMAX = 1e-4  # W; the oracle returns p_max * 1 on every test instance here
DESK_CFG = trainer.TrainConfig(learning_rate=1e-4, batch_size=64, epochs=5000, smc=16)
LOW_CFG = trainer.TrainConfig(learning_rate=1e-3, batch_size=64, epochs=300, smc=16, h0=-1e9)


def scenario(I, p_max):
    return chanmodel.ScenarioConfig(num_users=I, p_max=p_max)


@pytest.fixture(scope="session")
def desk_data():
    """{I: (train, test, oracle EE, oracle p)} for I = 2 and 4 at DESK_PMAX."""
    out = {}
    for I in (2, 4):
        sc = scenario(I, DESK_PMAX)
        tr = chanmodel.generate_dataset(sc, 512, seed=1)
        te = chanmodel.generate_dataset(sc, 100, split="test", seed=2)
        res = [oracle.grid_search(G, DESK_PMAX) for G in te.gains()]
        out[I] = (tr, te, np.array([r.ee for r in res]), np.array([r.p for r in res]))
    return out


@pytest.fixture(scope="session")
def trained4(desk_data):
    tr = desk_data[4][0]
    return trainer.train(tr, DESK_CFG)


@pytest.fixture(scope="session")
def trained2(desk_data):
    tr = desk_data[2][0]
    return trainer.train(tr, DESK_CFG)


@pytest.fixture(scope="session")
def low_power():
    sc = scenario(4, LOW_PMAX)
    tr = chanmodel.generate_dataset(sc, 512, seed=1)
    te = chanmodel.generate_dataset(sc, 100, split="test", seed=2)
    res = [oracle.grid_search(G, LOW_PMAX) for G in te.gains()]
    return tr, te, np.array([r.ee for r in res]), np.array([r.p for r in res])


@pytest.fixture(scope="session")
def trained_low(low_power):
    return trainer.train(low_power[0], LOW_CFG)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_gains(rng, I, B=None):
    """Log-uniform positive gains spanning a few decades."""
    shape = (I, I) if B is None else (B, I, I)
    return 10.0 ** rng.uniform(-2, 2, shape)


# ------------------------------------------------------------------ acceptance summary

ACCEPTANCE = {}


def record(number, passed, detail):
    """Store and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
