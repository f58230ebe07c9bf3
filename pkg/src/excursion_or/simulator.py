"""Synthetic trial generators, the marginal-effect oracle, and the comparator.

Two families are implemented, both fully available (I = 1) with T decision
points and a state X_t drawn i.i.d. uniform on (0, 2):

* Family "S1": outcome and treatment are drawn jointly from a four-cell
  log-linear model whose interaction term is exactly (b0 + b1 X) A on the
  log-odds scale, so the moderated effect is linear in X by construction
  and randomization depends on the state (and t) only.  Three variants
  move the nuisance surfaces through linear, quadratic-bump, and periodic
  shapes without touching the effect.

* Family "S2": treatment is randomized with probability expit(2 - 2(X-1)),
  so randomization depends on a covariate excluded from a marginal (f = 1)
  analysis; the outcome mean under each arm is a known smooth in (X, t).
  The marginal log odds-ratio estimand has no closed form and is computed
  by quadrature.  ``null_effect=True`` replaces the treated-arm mean with
  the untreated one, making the true effect exactly zero while outcomes
  still depend on X and t.

The comparator is a pooled logistic regression with linear terms and a
cluster-robust (working-independence) sandwich, the standard practice this
package's estimators are benchmarked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import expit, logit

from .data import MrtDataset, from_arrays
from .errors import ScenarioError, SingularError
from .features import FeatureSpec
from .glm import fit_penalized_logistic
from .results import EstimateResult, SolverInfo, make_result

FAMILIES = ("S1", "S2")
VARIANTS = ("Linear", "SimpleNonlinear", "Periodic")
IMPLEMENTATIONS = ("A", "B", "C", "D")

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> int:
    """One splitmix64 finalization step (deterministic 64-bit mixing)."""
    z = (state + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(master: int, index: int) -> int:
    """Seed for stream ``index``: independent of how streams are scheduled."""
    return splitmix64((master + (index + 1) * _GOLDEN) & _MASK64)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed & _MASK64))


def q22(x):
    """The bump 6 x (1 - x), zero at both ends of [0, 1] and 1.5 at the middle."""
    return 6.0 * x * (1.0 - x)


@dataclass(frozen=True)
class S1Params:
    """Effect and nuisance parameters of the four-cell family."""

    beta0: float = 1.0
    beta1: float = -0.9
    gamma0: float = 0.25
    gamma1: float = -0.25
    h2_t_coef: float = 2.0   # time coefficient of h2 in the SimpleNonlinear variant


@dataclass(frozen=True)
class SimScenario:
    """One simulation configuration."""

    family: str
    variant: str
    n: int
    T: int = 20
    seed: int = 0
    implementation: str = "A"
    params: S1Params = field(default_factory=S1Params)
    null_effect: bool = False

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ScenarioError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.variant not in VARIANTS:
            raise ScenarioError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.implementation not in IMPLEMENTATIONS:
            raise ScenarioError(
                f"implementation must be one of {IMPLEMENTATIONS}, got {self.implementation!r}")
        if self.n < 1 or self.T < 1:
            raise ScenarioError(f"need n >= 1 and T >= 1, got n={self.n}, T={self.T}")
        if self.null_effect and self.family != "S2":
            raise ScenarioError("null_effect is only defined for the S2 family")
        if self.family == "S2":
            _check_s2_means(self.variant, self.T)

    def with_seed(self, seed: int) -> "SimScenario":
        return replace(self, seed=seed)


# ---------------------------------------------------------------------------
# Family S1
# ---------------------------------------------------------------------------

_H_COEFS = {
    # variant -> (h1 coefficients, h2 coefficients); the SimpleNonlinear h2
    # time coefficient is parameterized (see S1Params).
    "Linear": ((-1.0, 1.0, -0.1), (0.5, 0.2, -0.1)),
    "SimpleNonlinear": ((-0.5, 1.1, -1.2), (-0.6, -0.4, None)),
    "Periodic": ((-0.5, 0.8, -0.8), (-0.2, -0.4, 1.0)),
}


def _g_surface(variant: str, coefs, x, t, T: int, params: S1Params):
    lam0, lam1, lam2 = coefs
    if lam2 is None:
        lam2 = params.h2_t_coef
    if variant == "Linear":
        return lam0 + lam1 * x + lam2 * t
    if variant == "SimpleNonlinear":
        return lam0 + lam1 * q22(x / 2.0) + lam2 * q22(t / T)
    return lam0 + lam1 * np.sin(x) + lam2 * np.sin(t)


def s1_surfaces(scenario: SimScenario, x, t):
    """The two nuisance surfaces h1 (treatment side) and h2 (outcome side)."""
    c1, c2 = _H_COEFS[scenario.variant]
    h1 = _g_surface(scenario.variant, c1, x, t, scenario.T, scenario.params)
    h2 = _g_surface(scenario.variant, c2, x, t, scenario.T, scenario.params)
    return h1, h2


def s1_cell_probs(scenario: SimScenario, x, t) -> np.ndarray:
    """Joint cell probabilities over (Y, A), last axis ordered (00, 01, 10, 11)."""
    p = scenario.params
    h1, h2 = s1_surfaces(scenario, x, t)
    x = np.asarray(x, dtype=float)
    s00 = np.ones(np.broadcast(x, h1).shape)
    s01 = np.exp(p.gamma0 + h1)
    s10 = np.exp(p.gamma1 + h2)
    s11 = np.exp(p.beta0 + p.beta1 * x + p.gamma0 + p.gamma1 + h1 + h2)
    cells = np.stack([s00, s01, s10, s11], axis=-1)
    total = cells.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(total)):
        raise ScenarioError("four-cell weights overflow for these parameters")
    return cells / total


def s1_true_beta(scenario: SimScenario) -> tuple[float, float]:
    """The moderated effect is (beta0 + beta1 x) exactly, by construction."""
    return scenario.params.beta0, scenario.params.beta1


def gen_s1(scenario: SimScenario) -> MrtDataset:
    """Draw one S1 trial; the randomization probability column is exact."""
    if scenario.family != "S1":
        raise ScenarioError(f"gen_s1 got a {scenario.family!r} scenario")
    rng = _rng(scenario.seed)
    n, T = scenario.n, scenario.T
    x = rng.uniform(0.0, 2.0, size=(n, T))
    t_grid = np.arange(1, T + 1, dtype=float)[None, :]
    cells = s1_cell_probs(scenario, x, np.broadcast_to(t_grid, (n, T)))
    u = rng.uniform(size=(n, T, 1))
    idx = np.minimum((u >= np.cumsum(cells, axis=-1)).sum(axis=-1), 3)
    treat = (idx % 2).astype(int)
    outcome = (idx // 2).astype(int)
    prob = cells[..., 1] + cells[..., 3]
    return from_arrays(
        subject_ids=list(range(n)),
        avail=np.ones((n, T), dtype=int),
        treat=treat,
        prob=prob,
        outcome=outcome,
        covariates={"X": x},
    )


# ---------------------------------------------------------------------------
# Family S2
# ---------------------------------------------------------------------------

def s2_mean(variant: str, arm: int, x, t, T: int = 20):
    """Outcome mean under treatment ``arm`` at state x and decision point t."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if variant == "Linear":
        if arm == 1:
            return 0.8 - 0.3 * x + 0.1 * t / T
        return 0.1 + 0.3 * x + 0.1 * t / T
    if variant == "SimpleNonlinear":
        if arm == 1:
            return 0.4 + 0.3 * q22(x / 2.0) - 0.1 * q22(t / T)
        return 0.7 - 0.4 * q22(x / 2.0) + 0.1 * q22(t / T)
    if variant == "Periodic":
        if arm == 1:
            return 0.6 + 0.1 * np.sin(3.0 * x) - 0.1 * np.sin(t)
        return 0.45 + 0.1 * np.sin(3.0 * x) + 0.05 * np.sin(t)
    raise ScenarioError(f"unknown variant {variant!r}")


def _check_s2_means(variant: str, T: int) -> None:
    x = np.linspace(0.0, 2.0, 201)
    t = np.arange(1, T + 1, dtype=float)
    xx, tt = np.meshgrid(x, t)
    for arm in (0, 1):
        mu = s2_mean(variant, arm, xx, tt, T)
        if mu.min() < 0.0 or mu.max() > 1.0:
            raise ScenarioError(
                f"{variant} arm-{arm} mean leaves [0,1] "
                f"(range [{mu.min():.3f}, {mu.max():.3f}])")


def s2_randomization(x):
    """Trial randomization probability: expit(2 - 2 (x - 1))."""
    return expit(2.0 - 2.0 * (np.asarray(x, dtype=float) - 1.0))


def gen_s2(scenario: SimScenario) -> MrtDataset:
    """Draw one S2 trial (covariate-dependent randomization)."""
    if scenario.family != "S2":
        raise ScenarioError(f"gen_s2 got a {scenario.family!r} scenario")
    rng = _rng(scenario.seed)
    n, T = scenario.n, scenario.T
    x = rng.uniform(0.0, 2.0, size=(n, T))
    prob = s2_randomization(x)
    treat = (rng.uniform(size=(n, T)) < prob).astype(int)
    t_grid = np.broadcast_to(np.arange(1, T + 1, dtype=float)[None, :], (n, T))
    mu0 = s2_mean(scenario.variant, 0, x, t_grid, T)
    mu1 = mu0 if scenario.null_effect else s2_mean(scenario.variant, 1, x, t_grid, T)
    mu = np.where(treat == 1, mu1, mu0)
    outcome = (rng.uniform(size=(n, T)) < mu).astype(int)
    return from_arrays(
        subject_ids=list(range(n)),
        avail=np.ones((n, T), dtype=int),
        treat=treat,
        prob=prob,
        outcome=outcome,
        covariates={"X": x},
    )


def gen_scenario(scenario: SimScenario) -> MrtDataset:
    """Dispatch on the scenario family."""
    return gen_s1(scenario) if scenario.family == "S1" else gen_s2(scenario)


@lru_cache(maxsize=32)
def true_marginal_cee_s2(variant: str, T: int = 20) -> float:
    """Marginal log odds-ratio estimand of the S2 family, by quadrature.

    For each decision point the state is integrated out of each arm's mean
    (X ~ U(0,2), density 1/2) before taking log-odds, then the T values are
    averaged with equal weight.
    """
    if variant not in VARIANTS:
        raise ScenarioError(f"variant must be one of {VARIANTS}, got {variant!r}")
    total = 0.0
    for t in range(1, T + 1):
        means = []
        for arm in (0, 1):
            val, _ = integrate.quad(
                lambda x, a=arm, tt=t: 0.5 * float(s2_mean(variant, a, x, tt, T)),
                0.0, 2.0, epsabs=1e-10, epsrel=1e-12)
            means.append(val)
        total += float(logit(means[1]) - logit(means[0]))
    return total / T


def mc_marginal_cee_s2(variant: str, T: int = 20, n_draws: int = 10_000_000,
                       seed: int = 20260819) -> tuple[float, float]:
    """Monte Carlo version of the oracle with a delta-method standard error.

    Uses common uniforms for the two arms at each decision point; returns
    (estimate, Monte Carlo SE).
    """
    rng = _rng(seed)
    per_t = max(n_draws // T, 2)
    total = 0.0
    var_total = 0.0
    for t in range(1, T + 1):
        x = rng.uniform(0.0, 2.0, size=per_t)
        mu1 = np.asarray(s2_mean(variant, 1, x, float(t), T))
        mu0 = np.asarray(s2_mean(variant, 0, x, float(t), T))
        m1, m0 = float(mu1.mean()), float(mu0.mean())
        total += float(logit(m1) - logit(m0))
        # Linearize logit(mean mu1) - logit(mean mu0) in the common draws.
        influence = mu1 / (m1 * (1.0 - m1)) - mu0 / (m0 * (1.0 - m0))
        var_total += float(influence.var(ddof=1)) / per_t
    return total / T, float(np.sqrt(var_total)) / T


# ---------------------------------------------------------------------------
# Comparator
# ---------------------------------------------------------------------------

def pooled_logistic_comparator(ds: MrtDataset, mean_spec: FeatureSpec) -> EstimateResult:
    """Pooled logistic regression with a cluster-robust sandwich.

    Fits Y on the given (linear) terms over all available records under a
    working-independence correlation, then sandwiches per-subject scores.
    This is the conventional analysis the excursion estimators are compared
    against; with covariate-dependent randomization its treatment
    coefficient is generally biased for the marginal effect.
    """
    n, T = ds.avail.shape
    flat = (ds.avail == 1).reshape(-1)
    env = ds.column_env(mask=flat)
    X = mean_spec.design(env)
    y = ds.outcome.reshape(-1)[flat]
    fit = fit_penalized_logistic(X, y, basis=mean_spec)
    mu = fit.predict_mean(X)
    subj = np.repeat(np.arange(n), T)[flat]
    resid = y - mu
    scores = np.zeros((n, X.shape[1]))
    np.add.at(scores, subj, X * resid[:, None])
    bread = (X.T @ (X * (mu * (1.0 - mu))[:, None])) / n
    meat = (scores.T @ scores) / n
    try:
        half = np.linalg.solve(bread, meat)
        vcov = np.linalg.solve(bread, half.T).T / n
    except np.linalg.LinAlgError as exc:
        raise SingularError(f"comparator bread is singular: {exc}") from exc
    vcov = 0.5 * (vcov + vcov.T)
    info = SolverInfo(fit.iterations, fit.final_score_norm, fit.converged)
    return make_result("GEE", mean_spec.column_names(), fit.coefficients, vcov, info,
                       n_subjects=n, n_records_excluded=0)
