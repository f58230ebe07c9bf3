"""Working-model fits feeding the excursion-effect estimating functions.

Four nuisances appear across the two estimators, all fit on eligible records
whose excursion window fits inside the trial:

* ``r``: association between state and the weighted outcome among untreated
  records, on the log-odds scale (quasi-binomial on the A=0 subset).
* ``m``: probability of treatment among records whose weighted outcome is
  zero (plain logistic on the Y=0 subset).
* ``mu``: mean weighted outcome given history and treatment (quasi-binomial
  with treatment terms; predictions are made under forced A=1 and A=0).
* ``alpha``: the association model solved from the treated-record moment
  equation with inverse-probability case weights, unpenalized so the moment
  holds to solver precision at the root.

Spline knots are pinned once per dataset (empirical quantiles over eligible
in-window records) so every fit and every prediction share one basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import AnalysisSpec, MrtDataset, excursion_weights
from .errors import ConvergenceError, InsufficientDataError, SpecError
from .features import FeatureSpec, resolve_spec
from .glm import (
    DEFAULT_LAMBDA_GRID,
    PenalizedLogisticFit,
    fit_with_gcv,
    solve_link_moment,
)


@dataclass(frozen=True)
class AnalysisFrame:
    """Flat arrays over the records that can contribute to estimation.

    Retained records are eligible (available) and have a complete excursion
    window; they are stored subject-major so per-subject sums are segment
    sums.  ``n_excluded`` counts records dropped for incomplete windows.
    """

    ds: MrtDataset
    spec: AnalysisSpec
    subj: np.ndarray          # (N,) subject index of each record
    omega: np.ndarray         # (N,) estimand weight omega_t
    treat: np.ndarray         # (N,)
    prob: np.ndarray          # (N,)
    outcome: np.ndarray       # (N,) raw Y
    wy: np.ndarray            # (N,) W * Y
    env: Mapping[str, np.ndarray]         # flat columns for design evaluation
    flat_mask: np.ndarray     # (n*T,) selector the frame was built with
    n_subjects: int
    n_excluded: int


def build_frame(ds: MrtDataset, spec: AnalysisSpec) -> AnalysisFrame:
    """Compute weights once and flatten the usable records."""
    n, T = ds.avail.shape
    weights = excursion_weights(ds, spec)
    in_window = np.isfinite(weights[0]) if n else np.zeros(T, bool)
    keep2d = (ds.avail == 1) & in_window[None, :]
    flat = keep2d.reshape(-1)
    subj = np.repeat(np.arange(n), T)[flat]
    omega_t = spec.omega_array()
    omega = np.tile(omega_t, n)[flat]
    return AnalysisFrame(
        ds=ds,
        spec=spec,
        subj=subj,
        omega=omega,
        treat=ds.treat.reshape(-1)[flat].astype(float),
        prob=ds.prob.reshape(-1)[flat],
        outcome=ds.outcome.reshape(-1)[flat],
        wy=(weights * ds.outcome).reshape(-1)[flat],
        env=ds.column_env(mask=flat),
        flat_mask=flat,
        n_subjects=n,
        n_excluded=int(n * T - in_window.sum() * n),
    )


@dataclass(frozen=True)
class NuisanceSet:
    """Fitted nuisances; fields are None when an estimator does not need them."""

    r_fit: PenalizedLogisticFit | None = None
    m_fit: PenalizedLogisticFit | None = None
    mu_fit: PenalizedLogisticFit | None = None
    alpha: np.ndarray | None = None
    alpha_basis: FeatureSpec | None = None
    alpha_score_norm: float | None = None
    alpha_iterations: int | None = None


@dataclass(frozen=True)
class NuisanceSpec:
    """Term lists for each working model plus the shared ridge grid."""

    r: FeatureSpec | None = None
    m: FeatureSpec | None = None
    mu: FeatureSpec | None = None
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID


def _design(frame: AnalysisFrame, basis: FeatureSpec, rows: np.ndarray | None = None,
            treat_override: float | None = None) -> np.ndarray:
    env = frame.env
    if treat_override is not None:
        env = dict(env)
        env["a"] = np.full(len(frame.subj), float(treat_override))
    if rows is not None:
        env = {k: v[rows] for k, v in env.items()}
    return basis.design(env)


def _fit_r(frame: AnalysisFrame, basis: FeatureSpec,
           lambda_grid=DEFAULT_LAMBDA_GRID) -> PenalizedLogisticFit:
    rows = frame.treat == 0.0
    if not rows.any():
        raise InsufficientDataError("no untreated eligible records to fit r on")
    X = _design(frame, basis, rows)
    fit, _ = fit_with_gcv(X, frame.wy[rows], lambda_grid=lambda_grid,
                          penalized=basis.penalized_mask(), basis=basis)
    return fit


def _fit_m(frame: AnalysisFrame, basis: FeatureSpec,
           lambda_grid=DEFAULT_LAMBDA_GRID) -> PenalizedLogisticFit:
    rows = frame.outcome == 0.0
    if not rows.any():
        raise InsufficientDataError("no zero-outcome eligible records to fit m on")
    X = _design(frame, basis, rows)
    fit, _ = fit_with_gcv(X, frame.treat[rows], lambda_grid=lambda_grid,
                          penalized=basis.penalized_mask(), basis=basis)
    return fit


def _fit_mu(frame: AnalysisFrame, basis: FeatureSpec,
            lambda_grid=DEFAULT_LAMBDA_GRID) -> PenalizedLogisticFit:
    X = _design(frame, basis)
    fit, _ = fit_with_gcv(X, frame.wy, lambda_grid=lambda_grid,
                          penalized=basis.penalized_mask(), basis=basis)
    return fit


def _fit_alpha(frame: AnalysisFrame, basis: FeatureSpec):
    rows = frame.treat == 1.0
    if not rows.any():
        raise InsufficientDataError("no treated eligible records to fit the association model on")
    c = frame.wy[rows]
    # Boundary responses leave the moment score one-signed at every finite
    # alpha: all weighted outcomes zero, or every treated outcome equal to one
    # (the weighted response then equals the weight itself).
    if np.all(c == 0.0):
        raise ConvergenceError(
            "every weighted association response is zero; the moment score "
            "cannot vanish at finite alpha", iterations=0, final_norm=float("inf"))
    if np.all(frame.outcome[rows] == 1.0):
        raise ConvergenceError(
            "every treated eligible outcome is one; the moment score cannot "
            "vanish at finite alpha", iterations=0, final_norm=float("inf"))
    G = _design(frame, basis, rows)
    case_w = 1.0 / frame.prob[rows]
    tol = 1e-10 * max(1, frame.n_subjects)
    return solve_link_moment(G, c, case_w, frame.spec.link_l, tol=tol)


def fit_r(ds: MrtDataset, spec: AnalysisSpec, basis: FeatureSpec,
          lambda_grid=DEFAULT_LAMBDA_GRID) -> PenalizedLogisticFit:
    """Log-odds model for the weighted outcome among untreated records."""
    frame = build_frame(ds, spec)
    return _fit_r(frame, resolve_spec(basis, frame.env), lambda_grid)


def fit_m(ds: MrtDataset, spec: AnalysisSpec, basis: FeatureSpec,
          lambda_grid=DEFAULT_LAMBDA_GRID) -> PenalizedLogisticFit:
    """Treatment probability among records with zero weighted outcome."""
    frame = build_frame(ds, spec)
    return _fit_m(frame, resolve_spec(basis, frame.env), lambda_grid)


def fit_mu(ds: MrtDataset, spec: AnalysisSpec, basis: FeatureSpec,
           lambda_grid=DEFAULT_LAMBDA_GRID) -> PenalizedLogisticFit:
    """Mean weighted outcome given history and treatment."""
    frame = build_frame(ds, spec)
    return _fit_mu(frame, resolve_spec(basis, frame.env), lambda_grid)


def fit_alpha(ds: MrtDataset, spec: AnalysisSpec,
              basis: FeatureSpec | None = None) -> tuple[np.ndarray, int, float]:
    """Solve the inverse-probability-weighted association moment equation.

    Returns (alpha, iterations, final summed-score norm); the subject-mean
    score at the root is below 1e-8 by construction.
    """
    g_spec = basis if basis is not None else spec.g_spec
    if g_spec is None:
        raise SpecError("an association model basis (g) is required")
    frame = build_frame(ds, spec)
    return _fit_alpha(frame, resolve_spec(g_spec, frame.env))


def fit_nuisances(ds: MrtDataset, spec: AnalysisSpec, nspec: NuisanceSpec,
                  frame: AnalysisFrame | None = None,
                  which: str | None = None) -> NuisanceSet:
    """Fit whatever the configured estimator needs.

    SR needs r, m and mu; GR (plain or generalized) needs mu and alpha.
    ``which`` overrides the spec's estimator tag.  Bases missing from
    ``nspec`` raise SpecError up front.
    """
    if frame is None:
        frame = build_frame(ds, spec)
    grid = nspec.lambda_grid
    kwargs: dict = {}
    if (which or spec.estimator) == "SR":
        for name, basis in (("r", nspec.r), ("m", nspec.m), ("mu", nspec.mu)):
            if basis is None:
                raise SpecError(f"SR estimation needs a basis for {name!r}")
        kwargs["r_fit"] = _fit_r(frame, resolve_spec(nspec.r, frame.env), grid)
        kwargs["m_fit"] = _fit_m(frame, resolve_spec(nspec.m, frame.env), grid)
        kwargs["mu_fit"] = _fit_mu(frame, resolve_spec(nspec.mu, frame.env), grid)
    else:
        if nspec.mu is None:
            raise SpecError("GR estimation needs a basis for 'mu'")
        if spec.g_spec is None:
            raise SpecError("GR estimation needs g terms on the analysis spec")
        kwargs["mu_fit"] = _fit_mu(frame, resolve_spec(nspec.mu, frame.env), grid)
        g_res = resolve_spec(spec.g_spec, frame.env)
        alpha, iters, norm = _fit_alpha(frame, g_res)
        kwargs.update(alpha=alpha, alpha_basis=g_res,
                      alpha_score_norm=norm, alpha_iterations=iters)
    return NuisanceSet(**kwargs)


@dataclass(frozen=True)
class NuisancePredictions:
    """Nuisance values per retained record, aligned with an AnalysisFrame."""

    exp_r: np.ndarray | None = None    # e^{r_hat}: odds of the weighted outcome under A=0
    m_hat: np.ndarray | None = None    # P(A=1 | ., Y=0)
    mu1: np.ndarray | None = None      # mean weighted outcome under forced A=1
    mu0: np.ndarray | None = None      # mean weighted outcome under forced A=0
    g_eta: np.ndarray | None = None    # g' alpha


def evaluate_nuisances(frame: AnalysisFrame, nuis: NuisanceSet) -> NuisancePredictions:
    """Evaluate every available nuisance fit on the frame's records."""
    values: dict = {}
    if nuis.r_fit is not None:
        if nuis.r_fit.basis is None:
            raise SpecError("r fit lost its basis; cannot predict")
        values["exp_r"] = np.exp(nuis.r_fit.linear_predictor(_design(frame, nuis.r_fit.basis)))
    if nuis.m_fit is not None:
        if nuis.m_fit.basis is None:
            raise SpecError("m fit lost its basis; cannot predict")
        values["m_hat"] = nuis.m_fit.predict_mean(_design(frame, nuis.m_fit.basis))
    if nuis.mu_fit is not None:
        if nuis.mu_fit.basis is None:
            raise SpecError("mu fit lost its basis; cannot predict")
        values["mu1"] = nuis.mu_fit.predict_mean(
            _design(frame, nuis.mu_fit.basis, treat_override=1.0))
        values["mu0"] = nuis.mu_fit.predict_mean(
            _design(frame, nuis.mu_fit.basis, treat_override=0.0))
    if nuis.alpha is not None:
        if nuis.alpha_basis is None:
            raise SpecError("alpha is present without its basis; cannot predict")
        values["g_eta"] = _design(frame, nuis.alpha_basis) @ nuis.alpha
    return NuisancePredictions(**values)
