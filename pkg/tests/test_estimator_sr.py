"""State-restricted estimator: hand cases, Jacobians, sandwich, robustness."""

import numpy as np
import numpy.testing as npt
import pytest
from scipy.optimize import brentq

from excursion_or.data import (AnalysisSpec, ReferencePolicy, from_arrays,
                               uniform_omega)
from excursion_or.errors import NumericalError
from excursion_or.estimator_sr import (RandomizationHeterogeneityWarning,
                                       estimate_sr, solve_sr, usr_eval,
                                       usr_jacobian, usr_prelim_eval,
                                       variance_sr)
from excursion_or.features import Covariate, FeatureSpec, Intercept
from excursion_or.glm import PenalizedLogisticFit
from excursion_or.nuisance import NuisanceSet, NuisanceSpec, fit_nuisances
from excursion_or.simulator import SimScenario, gen_scenario
from excursion_or.study import build_study_design

from conftest import ACCEPT_SEED, make_mrt

ONE = FeatureSpec((Intercept(),))
ONE_X = FeatureSpec((Intercept(), Covariate("X")))


def frozen_fit(coef):
    basis = FeatureSpec(tuple(Intercept() for _ in range(len(coef))))
    if len(coef) == 1:
        basis = ONE
    return PenalizedLogisticFit(coefficients=np.asarray(coef, dtype=float),
                                basis=basis, ridge_lambda=0.0, converged=True,
                                iterations=0, final_score_norm=0.0)


def neutral_nuisances():
    # mu1 = mu0 = expit(0) = 0.5, m = 0.5, exp(r) = 1
    return NuisanceSet(r_fit=frozen_fit([0.0]), m_fit=frozen_fit([0.0]),
                       mu_fit=frozen_fit([0.0]))


def balanced_four():
    # one record for each (A, Y) cell, p = 0.5 throughout
    return make_mrt(avail=[[1], [1], [1], [1]],
                    treat=[[0], [0], [1], [1]],
                    prob=[[0.5], [0.5], [0.5], [0.5]],
                    outcome=[[0], [1], [0], [1]])


def spec_t1(**kwargs):
    return AnalysisSpec(delta=1, omega=(1.0,), f_spec=ONE,
                        policy=ReferencePolicy.same_as_trial(), **kwargs)


def test_balanced_cells_make_the_score_vanish_at_zero():
    value = usr_eval(np.zeros(1), balanced_four(), spec_t1(), neutral_nuisances())
    assert value.shape == (1,)
    assert value[0] == 0.0


def test_balanced_cells_root_is_zero():
    beta, info = solve_sr(balanced_four(), spec_t1(), neutral_nuisances())
    assert abs(beta[0]) <= 1e-9
    assert info.converged and info.final_norm <= 1e-10

    # grid scan: the score brackets zero and is monotone through it
    grid = np.linspace(-3.0, 3.0, 121)
    vals = [usr_eval(np.array([b]), balanced_four(), spec_t1(),
                     neutral_nuisances())[0] for b in grid]
    assert vals[0] > 0.0 > vals[-1]
    root = brentq(lambda b: usr_eval(np.array([b]), balanced_four(), spec_t1(),
                                     neutral_nuisances())[0], -3.0, 3.0)
    assert abs(root) <= 1e-9


def test_only_supported_decision_points_contribute():
    base = make_mrt(avail=[[1, 1, 1]], treat=[[1, 0, 1]],
                    prob=[[0.5, 0.5, 0.5]], outcome=[[1, 1, 0]])
    tampered = make_mrt(avail=[[1, 1, 1]], treat=[[0, 0, 0]],
                        prob=[[0.3, 0.5, 0.7]], outcome=[[0, 1, 1]])
    spec = AnalysisSpec(delta=1, omega=(0.0, 1.0, 0.0), f_spec=ONE,
                        policy=ReferencePolicy.same_as_trial())
    nuis = neutral_nuisances()
    for beta in (np.array([0.0]), np.array([0.7])):
        npt.assert_allclose(usr_eval(beta, base, spec, nuis),
                            usr_eval(beta, tampered, spec, nuis), atol=1e-14)


def test_no_eligible_records_gives_the_zero_vector():
    ds = make_mrt(avail=[[0, 0], [0, 0]], treat=np.zeros((2, 2)),
                  prob=np.zeros((2, 2)), outcome=[[0, 1], [1, 0]])
    spec = AnalysisSpec(delta=1, omega=uniform_omega(2, 1), f_spec=ONE,
                        policy=ReferencePolicy.same_as_trial())
    value = usr_eval(np.array([0.3]), ds, spec, neutral_nuisances())
    npt.assert_array_equal(value, [0.0])


def test_score_overflow_is_reported():
    with pytest.raises(NumericalError):
        usr_eval(np.array([-800.0]), balanced_four(), spec_t1(), neutral_nuisances())


def _fitted_s1(n=30, seed=5):
    ds = gen_scenario(SimScenario("S1", "Linear", n=n, T=10, seed=seed))
    spec = AnalysisSpec(delta=1, omega=uniform_omega(10, 1), f_spec=ONE_X,
                        policy=ReferencePolicy.same_as_trial())
    nspec = NuisanceSpec(r=ONE_X, m=ONE_X,
                         mu=FeatureSpec((Intercept(), Covariate("X"),
                                         Covariate("a"))))
    return ds, spec, fit_nuisances(ds, spec, nspec, which="SR")


def test_jacobian_matches_central_differences():
    ds, spec, nuis = _fitted_s1()
    rng = np.random.default_rng(ACCEPT_SEED)
    h = 1e-6
    for _ in range(5):
        beta = rng.uniform(-1.0, 1.0, size=2)
        J = usr_jacobian(beta, ds, spec, nuis)
        fd = np.zeros((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd[:, k] = (usr_eval(beta + e, ds, spec, nuis)
                        - usr_eval(beta - e, ds, spec, nuis)) / (2.0 * h)
        assert np.linalg.norm(J - fd) / np.linalg.norm(J) <= 1e-6


def test_scalar_score_is_affine_in_exp_minus_beta():
    ds = gen_scenario(SimScenario("S1", "Linear", n=40, T=8, seed=15))
    spec = AnalysisSpec(delta=1, omega=uniform_omega(8, 1), f_spec=ONE,
                        policy=ReferencePolicy.same_as_trial())
    nspec = NuisanceSpec(r=ONE_X, m=ONE_X,
                         mu=FeatureSpec((Intercept(), Covariate("X"),
                                         Covariate("a"))))
    nuis = fit_nuisances(ds, spec, nspec, which="SR")

    def u(b):
        return usr_eval(np.array([b]), ds, spec, nuis)[0]

    # U(beta) = K0 + K1 e^{-beta}: recover the coefficients from two points
    k1 = 2.0 * (u(0.0) - u(np.log(2.0)))
    k0 = u(0.0) - k1
    # a third point confirms affinity
    assert u(1.0) == pytest.approx(k0 + k1 * np.exp(-1.0), abs=1e-12)

    closed = -np.log(-k0 / k1)
    beta, _ = solve_sr(ds, spec, nuis)
    assert beta[0] == pytest.approx(closed, abs=1e-9)
    bis = brentq(u, closed - 2.0, closed + 2.0, xtol=1e-12)
    assert beta[0] == pytest.approx(bis, abs=1e-8)

    # 1-D Jacobian is -e^{-beta} times the x-coefficient
    for b in (-0.5, 0.0, 0.8):
        J = usr_jacobian(np.array([b]), ds, spec, nuis)
        assert J[0, 0] == pytest.approx(-np.exp(-b) * k1, rel=1e-10)


def test_solver_reaches_the_same_root_from_far_away():
    ds, spec, nuis = _fitted_s1(n=100, seed=8)
    near, _ = solve_sr(ds, spec, nuis, init=np.zeros(2))
    far, _ = solve_sr(ds, spec, nuis, init=np.full(2, 5.0))
    npt.assert_allclose(near, far, atol=1e-8)
    assert np.linalg.norm(usr_eval(near, ds, spec, nuis)) <= 1e-10


def test_sandwich_assembles_per_subject_outer_products():
    ds, spec, nuis = _fitted_s1(n=40, seed=2)
    result = estimate_sr(ds, spec, nuis)
    beta = result.beta

    scores = []
    for i in range(ds.n_subjects):
        ds_i = from_arrays([ds.subject_ids[i]], ds.avail[i:i + 1],
                           ds.treat[i:i + 1], ds.prob[i:i + 1],
                           ds.outcome[i:i + 1],
                           {k: v[i:i + 1] for k, v in ds.covariates.items()})
        scores.append(usr_eval(beta, ds_i, spec, nuis))
    U = np.asarray(scores)
    meat = (U.T @ U) / ds.n_subjects
    bread = usr_jacobian(beta, ds, spec, nuis)
    manual = np.linalg.solve(bread, np.linalg.solve(bread, meat).T).T / ds.n_subjects
    npt.assert_allclose(result.vcov, 0.5 * (manual + manual.T), atol=1e-12)

    # scalar sandwich: vcov = M / (B^2 n); the marginal f makes the
    # state-heterogeneity heuristic fire on this DGM, which is correct
    spec1 = AnalysisSpec(delta=1, omega=spec.omega, f_spec=ONE, policy=spec.policy)
    nuis1 = fit_nuisances(ds, spec1, NuisanceSpec(
        r=ONE_X, m=ONE_X,
        mu=FeatureSpec((Intercept(), Covariate("X"), Covariate("a")))), which="SR")
    with pytest.warns(RandomizationHeterogeneityWarning):
        res1 = estimate_sr(ds, spec1, nuis1)
    b = usr_jacobian(res1.beta, ds, spec1, nuis1)[0, 0]
    u1 = np.array([usr_eval(res1.beta, from_arrays(
        [ds.subject_ids[i]], ds.avail[i:i + 1], ds.treat[i:i + 1],
        ds.prob[i:i + 1], ds.outcome[i:i + 1],
        {k: v[i:i + 1] for k, v in ds.covariates.items()}), spec1, nuis1)[0]
        for i in range(ds.n_subjects)])
    m = np.mean(u1 ** 2)
    assert res1.vcov[0, 0] == pytest.approx(m / (b * b * ds.n_subjects), rel=1e-10)


def test_result_intervals_and_spread():
    ds, spec, nuis = _fitted_s1(n=60, seed=19)
    result = estimate_sr(ds, spec, nuis)
    npt.assert_allclose(result.vcov, result.vcov.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(result.vcov) >= -1e-10)
    npt.assert_allclose(result.std_errors, np.sqrt(np.diag(result.vcov)))
    npt.assert_allclose(result.ci_lower, result.beta - 1.959964 * result.std_errors)
    npt.assert_allclose(result.ci_upper, result.beta + 1.959964 * result.std_errors)
    assert result.coef_names == ("(Intercept)", "X")
    assert result.estimator == "SR"


def test_sandwich_se_tracks_the_bootstrap():
    scenario = SimScenario("S1", "Linear", n=100, T=10, seed=ACCEPT_SEED)
    ds = gen_scenario(scenario)
    spec = AnalysisSpec(delta=1, omega=uniform_omega(10, 1), f_spec=ONE_X,
                        policy=ReferencePolicy.same_as_trial())
    nspec = NuisanceSpec(r=ONE_X, m=ONE_X,
                         mu=FeatureSpec((Intercept(), Covariate("X"),
                                         Covariate("a"))))
    result = estimate_sr(ds, spec, fit_nuisances(ds, spec, nspec, which="SR"))

    rng = np.random.default_rng(ACCEPT_SEED + 1)
    draws = []
    failures = 0
    for _ in range(500):
        idx = rng.integers(0, ds.n_subjects, size=ds.n_subjects)
        boot = from_arrays([f"b{j}" for j in range(len(idx))],
                           ds.avail[idx], ds.treat[idx], ds.prob[idx],
                           ds.outcome[idx],
                           {k: v[idx] for k, v in ds.covariates.items()})
        try:
            est = estimate_sr(boot, spec, fit_nuisances(boot, spec, nspec,
                                                        which="SR"))
        except Exception:
            failures += 1
            continue
        draws.append(est.beta)
    assert failures <= 25
    boot_se = np.asarray(draws).std(axis=0, ddof=1)
    npt.assert_allclose(result.std_errors, boot_se, rtol=0.15)


@pytest.mark.parametrize("implementation", ["B", "C"])
def test_double_robustness_with_one_misspecified_nuisance(implementation):
    scenario = SimScenario("S1", "SimpleNonlinear", n=2000, T=20,
                           seed=ACCEPT_SEED + 40, implementation=implementation)
    design = build_study_design(scenario)
    ds = gen_scenario(scenario)
    result = estimate_sr(ds, design.analysis, design.nuisance)
    truth = np.array([design.truth["(Intercept)"], design.truth["X"]])
    for j in range(2):
        assert abs(result.beta[j] - truth[j]) <= 3.0 * result.std_errors[j], (
            f"implementation {implementation}, coefficient {j}: "
            f"{result.beta[j]:.4f} vs {truth[j]:.4f} "
            f"(se {result.std_errors[j]:.4f})")


def test_heterogeneous_randomization_triggers_the_warning():
    # complete (A, Y) cells within each (X, prob) group keep beta = 0 an exact
    # root; X = 1 appears with two different probabilities at the same t
    cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
    groups = [(1.0, 0.3), (1.0, 0.7), (0.0, 0.5)]
    treat, outcome, prob, x = [], [], [], []
    for xv, pv in groups:
        for a, y in cells:
            treat.append([a])
            outcome.append([y])
            prob.append([pv])
            x.append([xv])
    ds = make_mrt(avail=np.ones((12, 1)), treat=treat, prob=prob,
                  outcome=outcome, covariates={"X": x})
    spec = AnalysisSpec(delta=1, omega=(1.0,), f_spec=ONE_X,
                        policy=ReferencePolicy.same_as_trial())
    with pytest.warns(RandomizationHeterogeneityWarning):
        result = estimate_sr(ds, spec, neutral_nuisances())
    npt.assert_allclose(result.beta, 0.0, atol=1e-9)


def test_state_determined_randomization_stays_silent():
    ds = gen_scenario(SimScenario("S2", "Linear", n=20, T=6, seed=6))
    spec = AnalysisSpec(delta=1, omega=uniform_omega(6, 1), f_spec=ONE_X,
                        policy=ReferencePolicy.same_as_trial())
    nspec = NuisanceSpec(r=ONE_X, m=ONE_X,
                         mu=FeatureSpec((Intercept(), Covariate("X"),
                                         Covariate("a"))))
    import warnings as _w
    with _w.catch_warnings():
        _w.simplefilter("error", RandomizationHeterogeneityWarning)
        estimate_sr(ds, spec, fit_nuisances(ds, spec, nspec, which="SR"))


def test_prelim_form_shares_the_sign_structure():
    ds, spec, nuis = _fitted_s1(n=50, seed=23)
    value = usr_prelim_eval(np.zeros(2), ds, spec, nuis)
    assert value.shape == (2,)
    assert np.all(np.isfinite(value))
