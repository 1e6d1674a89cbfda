import numpy as np
import pytest
from hypothesis import settings

from ffs import flow as fl
from ffs.numerics import SeededRng

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def randomized_flow(variant, d, M=2, H=1, W=8, seed=0, scale=0.3):
    """A flow with every parameter perturbed away from its identity init."""
    model = fl.init_flow(variant, d, M, H, W, SeededRng(seed))
    rng = SeededRng(seed, (99,))
    fl.initialize_actnorm(model, rng.normal((16, d)) * 1.5 + 0.3)
    model.set_params(model.get_params() + scale * rng.normal(model.n_params))
    return model


def numeric_logdet(model, x, h=1e-6):
    """ln|det J| from a central-difference Jacobian."""
    d = len(x)
    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (fl.forward(model, x + e)[0] - fl.forward(model, x - e)[0]) / (2 * h)
    return np.linalg.slogdet(J)[1]


@pytest.fixture
def make_flow():
    return randomized_flow


@pytest.fixture(scope="session")
def crescent_data():
    from ffs import datakit

    return datakit.generate(datakit.DatasetSpec(seed=0))


@pytest.fixture(scope="session")
def trained_flow_2d(crescent_data):
    """Glow flow fitted to crescent inliers for a few hundred steps."""
    from ffs import trainer

    train, _, _ = crescent_data
    model = fl.init_flow("Glow", 2, 2, 2, 32, SeededRng(0))
    trainer.train_flow(model, train.inliers().features, iters=400, seed=0)
    return model


def pytest_report_header(config):
    return f"numpy {np.__version__}"


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
