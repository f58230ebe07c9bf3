"""State-restricted doubly robust estimator on the log odds-ratio scale.

The moderated effect f_t(S_t)' beta is identified when randomization depends
on the moderator state alone.  Writing c = W Y for the weighted outcome,
e_r = exp(r_hat), mu_a for the fitted mean under forced treatment a, m for
the fitted treatment probability among zero outcomes, and p for the trial's
randomization probability, each record contributes

    omega_t I_t [ (c - A mu1 - (1-A) mu0) (e^{-A f'beta} + e_r) (A - m)
                  + (mu1 e^{-f'beta} - (1 - mu1) e_r) (1 - m) p
                  - (mu0 - (1 - mu0) e_r) m (1 - p) ] f

and the estimator is the root in beta of the subject-mean of these sums.
The estimating function is doubly robust: the root is consistent when either
the outcome-association pair (r) or the treatment pair (m) is correctly
specified, provided mu is compatible with whichever one is.

The variance is the standard M-estimation sandwich treating the fitted
nuisances as fixed, with per-subject score outer products as the meat.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import linalg as sla

from .data import AnalysisSpec, MrtDataset
from .errors import ConvergenceError, NumericalError, SingularError
from .features import Covariate, FeatureSpec, Interaction, SplineBasisTerm, resolve_spec
from .nuisance import (
    AnalysisFrame,
    NuisancePredictions,
    NuisanceSet,
    NuisanceSpec,
    build_frame,
    evaluate_nuisances,
    fit_nuisances,
)
from .results import EstimateResult, SolverInfo, make_result

_MAX_HALVINGS = 30


class RandomizationHeterogeneityWarning(UserWarning):
    """Randomization probabilities vary within identical moderator states."""


def _spec_covariate_names(spec: FeatureSpec) -> set[str]:
    names: set[str] = set()

    def walk(term) -> None:
        if isinstance(term, Covariate):
            names.add(term.name)
        elif isinstance(term, SplineBasisTerm):
            names.add(term.name)
        elif isinstance(term, Interaction):
            walk(term.left)
            walk(term.right)

    for term in spec.terms:
        walk(term)
    return names - {"a"}


def check_randomization_depends_on_state_only(frame: AnalysisFrame) -> None:
    """Warn when prob varies within records sharing the moderator state.

    The state-restricted estimator assumes the randomization probability is
    a function of S_t alone; heterogeneity within identical (S_t, t) groups
    is evidence against that.  Heuristic, so it warns rather than raises.
    """
    names = sorted(_spec_covariate_names(frame.spec.f_spec) & set(frame.env))
    key_cols = [frame.env[n] for n in names if n != "t"] + [frame.env["t"]]
    keys = np.column_stack(key_cols)
    order = np.lexsort(keys.T[::-1])
    sorted_keys = keys[order]
    sorted_prob = frame.prob[order]
    same_as_prev = np.all(sorted_keys[1:] == sorted_keys[:-1], axis=1)
    differs = same_as_prev & (np.abs(np.diff(sorted_prob)) > 1e-12)
    if differs.any():
        warnings.warn(
            "randomization probabilities vary within identical moderator states; "
            "the state-restricted estimator may be inconsistent here",
            RandomizationHeterogeneityWarning, stacklevel=3)


class _SrWork:
    """Flat arrays and designs kept across Newton iterations."""

    def __init__(self, frame: AnalysisFrame, nuis: NuisanceSet) -> None:
        preds = evaluate_nuisances(frame, nuis)
        for name in ("exp_r", "m_hat", "mu1", "mu0"):
            if getattr(preds, name) is None:
                raise ValueError(f"SR estimation needs the {name!r} nuisance")
        self.frame = frame
        self.preds: NuisancePredictions = preds
        self.f_res = resolve_spec(frame.spec.f_spec, frame.env)
        self.F = self.f_res.design(frame.env)
        self.n = frame.n_subjects
        self.A = frame.treat
        self.c = frame.wy
        self.p = frame.prob
        self.omega = frame.omega

    def score(self, beta: np.ndarray) -> np.ndarray:
        pr = self.preds
        fb = self.F @ beta
        with np.errstate(over="ignore", invalid="ignore"):
            e1 = np.exp(-fb)
            e_a = np.where(self.A == 1.0, e1, 1.0)
            resid = self.c - self.A * pr.mu1 - (1.0 - self.A) * pr.mu0
            t1 = resid * (e_a + pr.exp_r) * (self.A - pr.m_hat)
            t2 = (pr.mu1 * e1 - (1.0 - pr.mu1) * pr.exp_r) * (1.0 - pr.m_hat) * self.p
            t3 = -(pr.mu0 - (1.0 - pr.mu0) * pr.exp_r) * pr.m_hat * (1.0 - self.p)
            s = self.omega * (t1 + t2 + t3)
            return (self.F.T @ s) / self.n

    def jacobian(self, beta: np.ndarray) -> np.ndarray:
        pr = self.preds
        fb = self.F @ beta
        with np.errstate(over="ignore", invalid="ignore"):
            e1 = np.exp(-fb)
            resid = self.c - self.A * pr.mu1 - (1.0 - self.A) * pr.mu0
            j = self.omega * (
                -self.A * e1 * resid * (self.A - pr.m_hat)
                - pr.mu1 * e1 * (1.0 - pr.m_hat) * self.p)
            return (self.F.T @ (self.F * j[:, None])) / self.n

    def subject_scores(self, beta: np.ndarray) -> np.ndarray:
        pr = self.preds
        fb = self.F @ beta
        e1 = np.exp(-fb)
        e_a = np.where(self.A == 1.0, e1, 1.0)
        resid = self.c - self.A * pr.mu1 - (1.0 - self.A) * pr.mu0
        t1 = resid * (e_a + pr.exp_r) * (self.A - pr.m_hat)
        t2 = (pr.mu1 * e1 - (1.0 - pr.mu1) * pr.exp_r) * (1.0 - pr.m_hat) * self.p
        t3 = -(pr.mu0 - (1.0 - pr.mu0) * pr.exp_r) * pr.m_hat * (1.0 - self.p)
        s = self.omega * (t1 + t2 + t3)
        out = np.zeros((self.n, self.F.shape[1]))
        np.add.at(out, self.frame.subj, self.F * s[:, None])
        return out


def usr_eval(beta, ds: MrtDataset, spec: AnalysisSpec, nuis: NuisanceSet) -> np.ndarray:
    """Subject-mean estimating function at ``beta``."""
    work = _SrWork(build_frame(ds, spec), nuis)
    value = work.score(np.asarray(beta, dtype=float))
    if not np.all(np.isfinite(value)):
        raise NumericalError("estimating function overflowed at the requested beta")
    return value


def usr_jacobian(beta, ds: MrtDataset, spec: AnalysisSpec, nuis: NuisanceSet) -> np.ndarray:
    """Analytic derivative of the subject-mean estimating function."""
    work = _SrWork(build_frame(ds, spec), nuis)
    value = work.jacobian(np.asarray(beta, dtype=float))
    if not np.all(np.isfinite(value)):
        raise NumericalError("Jacobian overflowed at the requested beta")
    return value


def usr_prelim_eval(beta, ds: MrtDataset, spec: AnalysisSpec, nuis: NuisanceSet) -> np.ndarray:
    """The simpler singly-augmented form: documentation and diagnostics only.

    Each record contributes omega_t I_t {c e^{-A f'beta} - (1 - c) e^r}(A - m) f.
    Its root agrees with the full form asymptotically but is not the
    estimator this package reports.
    """
    frame = build_frame(ds, spec)
    work = _SrWork(frame, nuis)
    beta = np.asarray(beta, dtype=float)
    fb = work.F @ beta
    e_a = np.where(work.A == 1.0, np.exp(-fb), 1.0)
    s = work.omega * (work.c * e_a - (1.0 - work.c) * work.preds.exp_r) * (work.A - work.preds.m_hat)
    value = (work.F.T @ s) / work.n
    if not np.all(np.isfinite(value)):
        raise NumericalError("estimating function overflowed at the requested beta")
    return value


def _newton(work, init, tol: float, max_iter: int) -> tuple[np.ndarray, SolverInfo]:
    beta = np.zeros(work.F.shape[1]) if init is None else np.array(init, dtype=float)
    score = work.score(beta)
    norm = float(np.linalg.norm(score))
    if not np.isfinite(norm):
        raise NumericalError("estimating function is non-finite at the starting point")
    for iteration in range(1, max_iter + 1):
        if norm <= tol:
            return beta, SolverInfo(iteration - 1, norm, True)
        J = work.jacobian(beta)
        if not np.all(np.isfinite(J)):
            raise NumericalError("Jacobian became non-finite during iteration")
        try:
            step = -sla.solve(J, score)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularError(f"estimating-equation Jacobian is singular: {exc}") from exc
        if not np.all(np.isfinite(step)):
            raise SingularError("estimating-equation Jacobian is numerically singular")
        scale = 1.0
        for _ in range(_MAX_HALVINGS):
            trial = beta + scale * step
            trial_score = work.score(trial)
            trial_norm = float(np.linalg.norm(trial_score))
            if np.isfinite(trial_norm) and trial_norm < norm:
                beta, score, norm = trial, trial_score, trial_norm
                break
            scale *= 0.5
        else:
            raise ConvergenceError(
                f"root search stalled at norm {norm:.3e}",
                iterations=iteration, final_norm=norm)
    if norm <= tol:
        return beta, SolverInfo(max_iter, norm, True)
    raise ConvergenceError(
        f"no root found in {max_iter} iterations (norm {norm:.3e})",
        iterations=max_iter, final_norm=norm)


def solve_sr(ds: MrtDataset, spec: AnalysisSpec, nuis: NuisanceSet, init=None,
             tol: float = 1e-10, max_iter: int = 50) -> tuple[np.ndarray, SolverInfo]:
    """Find the root of the state-restricted estimating function."""
    work = _SrWork(build_frame(ds, spec), nuis)
    return _newton(work, init, tol, max_iter)


def _package(work: _SrWork, beta: np.ndarray, info: SolverInfo) -> EstimateResult:
    bread = work.jacobian(beta)
    scores = work.subject_scores(beta)
    meat = (scores.T @ scores) / work.n
    try:
        half = sla.solve(bread, meat)
        vcov = sla.solve(bread, half.T).T / work.n
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularError(f"sandwich bread is singular: {exc}") from exc
    vcov = 0.5 * (vcov + vcov.T)
    return make_result("SR", work.f_res.column_names(), beta, vcov, info,
                       n_subjects=work.n, n_records_excluded=work.frame.n_excluded)


def variance_sr(beta, ds: MrtDataset, spec: AnalysisSpec, nuis: NuisanceSet,
                solver: SolverInfo | None = None) -> EstimateResult:
    """Sandwich variance at ``beta`` and the packaged result."""
    work = _SrWork(build_frame(ds, spec), nuis)
    beta = np.asarray(beta, dtype=float)
    if solver is None:
        solver = SolverInfo(0, float(np.linalg.norm(work.score(beta))), True)
    return _package(work, beta, solver)


def estimate_sr(ds: MrtDataset, spec: AnalysisSpec,
                nuisance: NuisanceSpec | NuisanceSet, init=None,
                tol: float = 1e-10, max_iter: int = 50) -> EstimateResult:
    """Full pipeline: fit nuisances (if given as a spec), solve, and package."""
    frame = build_frame(ds, spec)
    if isinstance(nuisance, NuisanceSpec):
        nuis = fit_nuisances(ds, spec, nuisance, frame=frame, which="SR")
    else:
        nuis = nuisance
    check_randomization_depends_on_state_only(frame)
    work = _SrWork(frame, nuis)
    beta, info = _newton(work, init, tol, max_iter)
    return _package(work, beta, info)
