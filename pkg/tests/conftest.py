"""Shared fixtures for the test suite.

The replication studies used by the acceptance tests are expensive, so they
are session-scoped: each runs once per pytest invocation and every test that
needs its numbers reads the same object.  Fixtures that time themselves
return a dict with "metrics" and "seconds".
"""

import time

import numpy as np
import pytest

from excursion_or.data import from_arrays
from excursion_or.simulator import SimScenario, gen_scenario
from excursion_or.study import build_study_design, run_study

ACCEPT_SEED = 20260819


def make_mrt(avail, treat, prob, outcome, covariates=None, subject_ids=None):
    """Build a small validated dataset from 2-D (or 1-row) arrays."""
    avail = np.atleast_2d(np.asarray(avail))
    n = avail.shape[0]
    ids = list(range(n)) if subject_ids is None else list(subject_ids)
    covs = None
    if covariates is not None:
        covs = {name: np.atleast_2d(np.asarray(val, dtype=float))
                for name, val in covariates.items()}
    return from_arrays(ids, avail, np.atleast_2d(treat), np.atleast_2d(prob),
                       np.atleast_2d(outcome), covs)


def _timed_study(scenario, estimators, reps):
    start = time.perf_counter()
    metrics = run_study(scenario, estimators=estimators, reps=reps)
    return {"metrics": metrics, "seconds": time.perf_counter() - start}


@pytest.fixture(scope="session")
def s1_ds100():
    """A fixed medium S1 draw for estimator-level tests."""
    return gen_scenario(SimScenario("S1", "SimpleNonlinear", n=100, T=20, seed=7))


@pytest.fixture(scope="session")
def s1_design():
    return build_study_design(
        SimScenario("S1", "SimpleNonlinear", n=100, T=20, seed=7))


@pytest.fixture(scope="session")
def s2_ds150():
    """A fixed medium S2 draw for estimator-level tests."""
    return gen_scenario(SimScenario("S2", "Linear", n=150, T=20, seed=11))


@pytest.fixture(scope="session")
def s2_design():
    return build_study_design(SimScenario("S2", "Linear", n=150, T=20, seed=11))


@pytest.fixture(scope="session")
def study_s1_impl_a():
    scenario = SimScenario("S1", "SimpleNonlinear", n=200, T=20,
                           seed=ACCEPT_SEED, implementation="A")
    return _timed_study(scenario, ("SR", "GR"), 500)


@pytest.fixture(scope="session")
def study_s1_impl_b():
    scenario = SimScenario("S1", "SimpleNonlinear", n=200, T=20,
                           seed=ACCEPT_SEED + 1, implementation="B")
    return _timed_study(scenario, ("SR",), 500)


@pytest.fixture(scope="session")
def study_s1_impl_c():
    scenario = SimScenario("S1", "SimpleNonlinear", n=200, T=20,
                           seed=ACCEPT_SEED + 2, implementation="C")
    return _timed_study(scenario, ("SR", "GR"), 500)


@pytest.fixture(scope="session")
def study_s2_all_variants():
    out = {}
    start = time.perf_counter()
    for offset, variant in enumerate(("Linear", "SimpleNonlinear", "Periodic")):
        scenario = SimScenario("S2", variant, n=200, T=20,
                               seed=ACCEPT_SEED + 10 + offset)
        out[variant] = run_study(scenario, estimators=("GR",), reps=500)
    return {"metrics": out, "seconds": time.perf_counter() - start}


@pytest.fixture(scope="session")
def study_s2_comparator():
    scenario = SimScenario("S2", "Linear", n=2000, T=20, seed=ACCEPT_SEED + 20)
    return _timed_study(scenario, ("GEE",), 100)


@pytest.fixture(scope="session")
def study_null_effect():
    scenario = SimScenario("S2", "Linear", n=200, T=20, seed=ACCEPT_SEED + 30,
                           null_effect=True)
    return _timed_study(scenario, ("GR",), 500)
