"""Doubly robust estimator built on a treated-arm association model.

When randomization depends on more history than the moderator state, the
state-restricted form is no longer valid.  This estimator instead models the
association between history and the weighted outcome among treated records
(coefficients alpha, solved from an inverse-probability-weighted moment
equation) and combines it with the mean model under no treatment:

    U(beta) = P_n sum_t omega_t I_t [ hinv(eta_t) - mu0
                                      - (1-A)/(1-p) (c - mu0) ] f_t
    eta_t   = h(linv(g_t' alpha)) - f_t' beta

with c = W Y.  On the plain odds-ratio scale h and l are both the logistic
link and eta reduces algebraically to g'alpha - f'beta; this module always
applies that reduction when the two links coincide, so the generalized path
with logistic links reproduces the plain path exactly.

The variance stacks the beta-equation with the alpha moment equation and
sandwiches the joint system; the report extracts the beta block.  Because
the moment equation omits beta entirely, the bread is block triangular.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla

from .data import AnalysisSpec, MrtDataset
from .errors import ConvergenceError, NumericalError, PositivityError, SingularError, SpecError
from .features import resolve_spec
from .links import LOGIT, LinkFunction
from .nuisance import (
    AnalysisFrame,
    NuisanceSet,
    NuisanceSpec,
    build_frame,
    evaluate_nuisances,
    fit_nuisances,
)
from .results import EstimateResult, SolverInfo, StackedSystem, make_result

_MAX_HALVINGS = 30
_PROB_CLIP = 1e-12


class _GrWork:
    """Designs, nuisance values, and link plumbing bound to a fixed alpha."""

    def __init__(self, frame: AnalysisFrame, nuis: NuisanceSet, alpha,
                 link_h: LinkFunction, link_l: LinkFunction) -> None:
        if nuis.alpha_basis is None:
            raise SpecError("GR estimation needs the fitted association basis")
        preds = evaluate_nuisances(frame, nuis)
        if preds.mu0 is None:
            raise SpecError("GR estimation needs the 'mu' nuisance")
        self.frame = frame
        self.link_h = link_h
        self.link_l = link_l
        self.same_link = link_h.name == link_l.name
        self.f_res = resolve_spec(frame.spec.f_spec, frame.env)
        self.F = self.f_res.design(frame.env)
        self.G = nuis.alpha_basis.design(frame.env)
        self.alpha = np.asarray(alpha, dtype=float)
        self.g_eta = self.G @ self.alpha
        self.n = frame.n_subjects
        self.A = frame.treat
        self.p = frame.prob
        self.c = frame.wy
        self.mu0 = preds.mu0
        self.omega = frame.omega
        with np.errstate(divide="ignore", invalid="ignore"):
            self.correction = (1.0 - self.A) / (1.0 - self.p) * (self.c - self.mu0)
        if not np.all(np.isfinite(self.correction)):
            raise PositivityError("untreated record with randomization probability 1")
        if self.same_link:
            self.base = self.g_eta
            self.chain_alpha_extra = np.ones_like(self.g_eta)
        else:
            pred1 = np.clip(link_l.inverse(self.g_eta), _PROB_CLIP, 1.0 - _PROB_CLIP)
            self.base = link_h.forward(pred1)
            self.chain_alpha_extra = link_h.dforward(pred1) * link_l.dinverse(self.g_eta)
        # Pieces of the alpha moment equation (shared with the variance stack).
        self.l_mean = link_l.inverse(self.g_eta)
        self.l_dmean = link_l.dinverse(self.g_eta)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.ip_w = np.where(self.A == 1.0, self.A / self.p, 0.0)

    def score(self, beta: np.ndarray) -> np.ndarray:
        eta = self.base - self.F @ beta
        val = self.link_h.inverse(eta)
        s = self.omega * (val - self.mu0 - self.correction)
        return (self.F.T @ s) / self.n

    def jacobian_beta(self, beta: np.ndarray) -> np.ndarray:
        eta = self.base - self.F @ beta
        d = self.link_h.dinverse(eta)
        return -(self.F.T @ (self.F * (self.omega * d)[:, None])) / self.n

    def jacobian_alpha(self, beta: np.ndarray) -> np.ndarray:
        eta = self.base - self.F @ beta
        d = self.link_h.dinverse(eta) * self.chain_alpha_extra
        return (self.F.T @ (self.G * (self.omega * d)[:, None])) / self.n

    def q_score(self) -> np.ndarray:
        s = self.ip_w * (self.c - self.l_mean)
        return (self.G.T @ s) / self.n

    def q_jacobian_alpha(self) -> np.ndarray:
        return -(self.G.T @ (self.G * (self.ip_w * self.l_dmean)[:, None])) / self.n

    def subject_scores(self, beta: np.ndarray) -> np.ndarray:
        eta = self.base - self.F @ beta
        val = self.link_h.inverse(eta)
        s_u = self.omega * (val - self.mu0 - self.correction)
        s_q = self.ip_w * (self.c - self.l_mean)
        p_dim, q_dim = self.F.shape[1], self.G.shape[1]
        out = np.zeros((self.n, p_dim + q_dim))
        np.add.at(out[:, :p_dim], self.frame.subj, self.F * s_u[:, None])
        np.add.at(out[:, p_dim:], self.frame.subj, self.G * s_q[:, None])
        return out


def _work(ds, spec, nuis, link_h, link_l, alpha=None) -> _GrWork:
    if alpha is None:
        alpha = nuis.alpha
    if alpha is None:
        raise SpecError("GR estimation needs fitted association coefficients")
    return _GrWork(build_frame(ds, spec), nuis, alpha, link_h, link_l)


def ugr_eval(beta, alpha, ds: MrtDataset, spec: AnalysisSpec, nuis: NuisanceSet) -> np.ndarray:
    """Subject-mean estimating function on the plain odds-ratio scale."""
    work = _work(ds, spec, nuis, LOGIT, LOGIT, alpha)
    value = work.score(np.asarray(beta, dtype=float))
    if not np.all(np.isfinite(value)):
        raise NumericalError("estimating function overflowed at the requested beta")
    return value


def ugr_prelim_eval(beta, alpha, ds: MrtDataset, spec: AnalysisSpec,
                    nuis: NuisanceSet) -> np.ndarray:
    """The inverse-probability form without the mean-model augmentation.

    Each record contributes
    omega_t (A - p)/(p (1-p)) I_t [expit(g'alpha - f'beta) A + c (1-A)] f.
    Documentation and diagnostics only; the reported estimator uses the
    augmented form.
    """
    work = _work(ds, spec, nuis, LOGIT, LOGIT, alpha)
    beta = np.asarray(beta, dtype=float)
    val = LOGIT.inverse(work.g_eta - work.F @ beta)
    lever = (work.A - work.p) / (work.p * (1.0 - work.p))
    s = work.omega * lever * (val * work.A + work.c * (1.0 - work.A))
    value = (work.F.T @ s) / work.n
    if not np.all(np.isfinite(value)):
        raise NumericalError("estimating function overflowed at the requested beta")
    return value


def _newton(work: _GrWork, init, tol: float, max_iter: int) -> tuple[np.ndarray, SolverInfo]:
    beta = np.zeros(work.F.shape[1]) if init is None else np.array(init, dtype=float)
    score = work.score(beta)
    norm = float(np.linalg.norm(score))
    if not np.isfinite(norm):
        raise NumericalError("estimating function is non-finite at the starting point")
    for iteration in range(1, max_iter + 1):
        if norm <= tol:
            return beta, SolverInfo(iteration - 1, norm, True)
        J = work.jacobian_beta(beta)
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


def _stacked_variance(work: _GrWork, beta: np.ndarray, info: SolverInfo,
                      tag: str) -> tuple[EstimateResult, StackedSystem]:
    p_dim, q_dim = work.F.shape[1], work.G.shape[1]
    bread = np.zeros((p_dim + q_dim, p_dim + q_dim))
    bread[:p_dim, :p_dim] = work.jacobian_beta(beta)
    bread[:p_dim, p_dim:] = work.jacobian_alpha(beta)
    bread[p_dim:, p_dim:] = work.q_jacobian_alpha()
    scores = work.subject_scores(beta)
    meat = (scores.T @ scores) / work.n
    try:
        half = sla.solve(bread, meat)
        full_vcov = sla.solve(bread, half.T).T / work.n
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularError(f"stacked bread is singular: {exc}") from exc
    full_vcov = 0.5 * (full_vcov + full_vcov.T)
    stacked = StackedSystem(phi_dim=p_dim + q_dim, bread=bread, meat=meat,
                            full_vcov=full_vcov)
    result = make_result(tag, work.f_res.column_names(), beta,
                         full_vcov[:p_dim, :p_dim], info,
                         n_subjects=work.n,
                         n_records_excluded=work.frame.n_excluded)
    return result, stacked


def solve_gr(ds: MrtDataset, spec: AnalysisSpec, nuis: NuisanceSet, init=None,
             tol: float = 1e-10, max_iter: int = 50) -> tuple[np.ndarray, SolverInfo]:
    """Root of the plain (logistic-link) estimating function at the fitted alpha."""
    return _newton(_work(ds, spec, nuis, LOGIT, LOGIT), init, tol, max_iter)


def variance_gr(beta, ds: MrtDataset, spec: AnalysisSpec, nuis: NuisanceSet,
                solver: SolverInfo | None = None) -> tuple[EstimateResult, StackedSystem]:
    """Stacked sandwich at ``beta`` for the plain estimator."""
    work = _work(ds, spec, nuis, LOGIT, LOGIT)
    beta = np.asarray(beta, dtype=float)
    if solver is None:
        solver = SolverInfo(0, float(np.linalg.norm(work.score(beta))), True)
    return _stacked_variance(work, beta, solver, "GR")


def solve_gr_generalized(ds: MrtDataset, spec: AnalysisSpec, nuis: NuisanceSet,
                         init=None, tol: float = 1e-10,
                         max_iter: int = 50) -> tuple[np.ndarray, SolverInfo]:
    """Root under the spec's effect link h and association link l."""
    return _newton(_work(ds, spec, nuis, spec.link_h, spec.link_l), init, tol, max_iter)


def variance_gr_generalized(beta, ds: MrtDataset, spec: AnalysisSpec, nuis: NuisanceSet,
                            solver: SolverInfo | None = None
                            ) -> tuple[EstimateResult, StackedSystem]:
    """Stacked sandwich at ``beta`` under the spec's links."""
    work = _work(ds, spec, nuis, spec.link_h, spec.link_l)
    beta = np.asarray(beta, dtype=float)
    if solver is None:
        solver = SolverInfo(0, float(np.linalg.norm(work.score(beta))), True)
    return _stacked_variance(work, beta, solver, "GRGeneralized")


def estimate_gr(ds: MrtDataset, spec: AnalysisSpec,
                nuisance: NuisanceSpec | NuisanceSet, init=None,
                tol: float = 1e-10, max_iter: int = 50,
                generalized: bool | None = None) -> EstimateResult:
    """Full pipeline: fit alpha and mu if needed, solve for beta, sandwich.

    ``generalized`` defaults to whatever the spec's estimator tag says.
    """
    if generalized is None:
        generalized = spec.estimator == "GRGeneralized"
    frame = build_frame(ds, spec)
    if isinstance(nuisance, NuisanceSpec):
        nuis = fit_nuisances(ds, spec, nuisance, frame=frame, which="GR")
    else:
        nuis = nuisance
    link_h, link_l = (spec.link_h, spec.link_l) if generalized else (LOGIT, LOGIT)
    work = _GrWork(frame, nuis, nuis.alpha, link_h, link_l)
    beta, info = _newton(work, init, tol, max_iter)
    tag = "GRGeneralized" if generalized else "GR"
    result, _ = _stacked_variance(work, beta, info, tag)
    return result
