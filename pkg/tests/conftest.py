import sys

import numpy as np
import pytest

from lora_dyn.synth import ProblemConfig, assemble_problem, make_problem


def population_linear(d, k, r_star, spectrum, seed=0, n=None, w_pre="gaussian"):
    """Linear problem whose empirical covariance is exactly the identity."""
    return make_problem(ProblemConfig(d=d, k=k, n=n or 4 * d, r_star=r_star, spectrum=spectrum,
                                      data_dist="whitened", cov_eps=0.0, w_pre=w_pre, seed=seed))


def small_linear(seed=0, d=6, k=5, n=40, r_star=2):
    return make_problem(ProblemConfig(d=d, k=k, n=n, r_star=r_star,
                                      spectrum=(2.0, 1.0)[:r_star], seed=seed))


def small_relu(seed=0, d=6, k=4, n=60, r_star=2):
    return make_problem(ProblemConfig(model_kind="relu", d=d, k=k, n=n, r_star=r_star,
                                      spectrum=(1.5, 0.8)[:r_star], seed=seed))


def hand_problem(model_kind, w_pre, delta, x, r_star):
    return assemble_problem(model_kind, np.asarray(w_pre, float), np.asarray(delta, float),
                            np.asarray(x, float), r_star)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("]")[1].split(".")[0])):
        terminalreporter.write_line(line)
