"""Penalized quasi-binomial regression by iteratively reweighted least squares.

The response may be any nonnegative value (weighted outcomes can exceed one
for windows longer than one decision point); the mean-variance relation is
the binomial one, mu(1-mu), evaluated at the fitted mean.  The ridge penalty
applies only to the columns flagged in ``penalized`` (spline blocks); the
intercept and raw covariate columns are never shrunk.

Newton steps are damped by halving until the score norm decreases, which
keeps saturating fits (separation at lambda = 0) from oscillating.  Exactly
collinear columns are dropped deterministically, later columns first, via
the diagonal of an unpivoted QR factorization; dropped columns keep a zero
coefficient so the design's dimension is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.special import expit

from .errors import ConvergenceError, InsufficientDataError, ShapeError, SingularError
from .features import FeatureSpec
from .links import LinkFunction

# The grid top stays small relative to typical record counts: the penalty is
# not scaled by n, and heavy shrinkage of real spline structure biases the
# downstream moment estimators well before it helps their variance.
DEFAULT_LAMBDA_GRID = (1e-4, 1e-2, 1e-1)
_MAX_HALVINGS = 30


@dataclass(frozen=True)
class PenalizedLogisticFit:
    """A converged penalized fit plus the basis needed to predict with it."""

    coefficients: np.ndarray
    basis: FeatureSpec | None
    ridge_lambda: float
    converged: bool
    iterations: int
    final_score_norm: float

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        return X @ self.coefficients

    def predict_mean(self, X: np.ndarray) -> np.ndarray:
        return expit(self.linear_predictor(X))


def _score_and_weights(X, y, w, offset, beta, lam, pen):
    eta = X @ beta + offset
    mu = expit(eta)
    score = X.T @ (w * (y - mu)) - lam * (pen * beta)
    fisher_w = w * mu * (1.0 - mu)
    return score, fisher_w


def _collinear_keep_mask(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Keep-mask over columns; exact linear dependents of earlier columns drop."""
    Xw = X * np.sqrt(w)[:, None]
    r_diag = np.abs(np.diag(np.linalg.qr(Xw, mode="r")))
    tol = max(Xw.shape) * np.finfo(float).eps * (r_diag.max() if r_diag.size else 0.0)
    return r_diag > max(tol, 1e-12)


def _irls(X, y, w, offset, lam, pen, init, max_iter):
    beta = np.zeros(X.shape[1]) if init is None else np.array(init, dtype=float)
    score, fisher_w = _score_and_weights(X, y, w, offset, beta, lam, pen)
    norm = np.linalg.norm(score)
    for iteration in range(1, max_iter + 1):
        if norm <= 1e-8 * (1.0 + np.linalg.norm(beta)):
            return beta, iteration - 1, norm
        H = X.T @ (X * fisher_w[:, None])
        if lam > 0.0:
            H = H + lam * np.diag(pen.astype(float))
        try:
            step = sla.solve(H, score, assume_a="pos")
        except np.linalg.LinAlgError:
            raise SingularError("information matrix is singular")
        except ValueError as exc:
            raise SingularError(f"information matrix is unusable: {exc}") from exc
        if not np.all(np.isfinite(step)):
            raise SingularError("information matrix is numerically singular")
        scale = 1.0
        for _ in range(_MAX_HALVINGS):
            trial = beta + scale * step
            trial_score, trial_fisher = _score_and_weights(X, y, w, offset, trial, lam, pen)
            trial_norm = np.linalg.norm(trial_score)
            if np.isfinite(trial_norm) and trial_norm < norm:
                beta, score, fisher_w, norm = trial, trial_score, trial_fisher, trial_norm
                break
            scale *= 0.5
        else:
            raise ConvergenceError(
                f"step halving stalled at score norm {norm:.3e}",
                iterations=iteration, final_norm=float(norm))
    if norm <= 1e-8 * (1.0 + np.linalg.norm(beta)):
        return beta, max_iter, norm
    raise ConvergenceError(
        f"no convergence in {max_iter} iterations (score norm {norm:.3e})",
        iterations=max_iter, final_norm=float(norm))


def fit_penalized_logistic(X, y, case_weights=None, offset=None, ridge_lambda: float = 0.0,
                           penalized=None, max_iter: int = 100, init=None,
                           basis: FeatureSpec | None = None) -> PenalizedLogisticFit:
    """Fit the penalized quasi-binomial model; raises on failure.

    Raises InsufficientDataError (no usable rows), SingularError (rank
    deficiency not repairable by dropping columns), or ConvergenceError.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError(f"design {X.shape} incompatible with response {y.shape}")
    w = np.ones(X.shape[0]) if case_weights is None else np.asarray(case_weights, dtype=float)
    off = np.zeros(X.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    if np.any(w < 0):
        raise ShapeError("case weights must be nonnegative")
    if X.shape[0] == 0 or not np.any(w > 0):
        raise InsufficientDataError("no records with positive weight to fit on")
    pen = (np.zeros(X.shape[1], dtype=bool) if penalized is None
           else np.asarray(penalized, dtype=bool))
    if pen.shape != (X.shape[1],):
        raise ShapeError("penalized mask length must match the number of columns")

    try:
        beta, iters, norm = _irls(X, y, w, off, ridge_lambda, pen, init, max_iter)
    except SingularError:
        keep = _collinear_keep_mask(X, w)
        if keep.all():
            raise
        init_red = None if init is None else np.asarray(init, dtype=float)[keep]
        beta_red, iters, norm = _irls(
            X[:, keep], y, w, off, ridge_lambda, pen[keep], init_red, max_iter)
        beta = np.zeros(X.shape[1])
        beta[keep] = beta_red
    return PenalizedLogisticFit(
        coefficients=beta, basis=basis, ridge_lambda=float(ridge_lambda),
        converged=True, iterations=iters, final_score_norm=float(norm))


def _gcv_score(X, y, w, offset, fit: PenalizedLogisticFit, pen: np.ndarray) -> float:
    """Generalized cross-validation from the Pearson statistic and trace edf."""
    mu = expit(X @ fit.coefficients + offset)
    fisher_w = w * mu * (1.0 - mu)
    n_eff = int(np.sum(w > 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        pearson = np.sum(w * np.square(y - mu) / (mu * (1.0 - mu)))
    if not np.isfinite(pearson):
        return np.inf
    XtWX = X.T @ (X * fisher_w[:, None])
    H = XtWX + fit.ridge_lambda * np.diag(pen.astype(float))
    try:
        edf = float(np.trace(sla.solve(H, XtWX, assume_a="pos")))
    except (np.linalg.LinAlgError, ValueError):
        return np.inf
    denom = n_eff - edf
    if denom <= 0:
        return np.inf
    return n_eff * pearson / denom ** 2


def fit_with_gcv(X, y, case_weights=None, offset=None, lambda_grid=DEFAULT_LAMBDA_GRID,
                 penalized=None, basis: FeatureSpec | None = None
                 ) -> tuple[PenalizedLogisticFit, dict[float, float]]:
    """Fit across the ridge grid, warm-starting, and keep the GCV minimizer.

    Ties prefer the smaller lambda.  Designs with no penalized column skip
    the grid entirely (the penalty would be a no-op).
    """
    pen = (np.zeros(np.asarray(X).shape[1], dtype=bool) if penalized is None
           else np.asarray(penalized, dtype=bool))
    if not pen.any():
        fit = fit_penalized_logistic(X, y, case_weights, offset, 0.0, pen, basis=basis)
        return fit, {0.0: float("nan")}

    w = np.ones(np.asarray(X).shape[0]) if case_weights is None else np.asarray(case_weights, float)
    off = np.zeros(np.asarray(X).shape[0]) if offset is None else np.asarray(offset, float)
    grid = sorted(float(l) for l in lambda_grid)
    if not grid or any(l <= 0 for l in grid):
        raise ShapeError("lambda grid must be non-empty and strictly positive")

    scores: dict[float, float] = {}
    best: tuple[float, PenalizedLogisticFit] | None = None
    warm = None
    last_error: Exception | None = None
    for lam in grid:
        try:
            fit = fit_penalized_logistic(X, y, case_weights, offset, lam, pen,
                                         init=warm, basis=basis)
        except (ConvergenceError, SingularError) as exc:
            scores[lam] = np.inf
            last_error = exc
            continue
        warm = fit.coefficients
        scores[lam] = _gcv_score(np.asarray(X, float), np.asarray(y, float), w, off, fit, pen)
        if best is None or scores[lam] < scores[best[0]]:
            best = (lam, fit)
    if best is None:
        raise last_error if last_error is not None else ConvergenceError("no lambda converged")
    return best[1], scores


def solve_link_moment(G, response, case_weights, link: LinkFunction, init=None,
                      tol: float = 1e-10, max_iter: int = 100) -> tuple[np.ndarray, int, float]:
    """Solve sum_i w_i (response_i - linkinv(G_i alpha)) G_i = 0 by damped Newton.

    Works for any strictly monotone link (the Jacobian is negative definite
    whenever G has full column rank).  ``tol`` is absolute on the summed
    score.  Returns (alpha, iterations, final score norm).
    """
    G = np.asarray(G, dtype=float)
    c = np.asarray(response, dtype=float)
    w = np.asarray(case_weights, dtype=float)
    if G.ndim != 2 or c.shape != (G.shape[0],) or w.shape != (G.shape[0],):
        raise ShapeError("incompatible shapes in moment system")
    if G.shape[0] == 0 or not np.any(w > 0):
        raise InsufficientDataError("no records with positive weight in moment system")

    alpha = np.zeros(G.shape[1]) if init is None else np.array(init, dtype=float)

    def score_at(a):
        eta = G @ a
        mu = link.inverse(eta)
        return G.T @ (w * (c - mu)), eta

    score, eta = score_at(alpha)
    norm = np.linalg.norm(score)
    for iteration in range(1, max_iter + 1):
        if norm <= tol:
            return alpha, iteration - 1, float(norm)
        dmu = link.dinverse(eta)
        J = G.T @ (G * (w * dmu)[:, None])
        try:
            step = sla.solve(J, score, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularError(f"moment system Jacobian is singular: {exc}") from exc
        if not np.all(np.isfinite(step)):
            raise SingularError("moment system Jacobian is numerically singular")
        scale = 1.0
        for _ in range(_MAX_HALVINGS):
            trial = alpha + scale * step
            trial_score, trial_eta = score_at(trial)
            trial_norm = np.linalg.norm(trial_score)
            if np.isfinite(trial_norm) and trial_norm < norm:
                alpha, score, eta, norm = trial, trial_score, trial_eta, trial_norm
                break
            scale *= 0.5
        else:
            raise ConvergenceError(
                f"association solver stalled at score norm {norm:.3e}",
                iterations=iteration, final_norm=float(norm))
    if norm <= tol:
        return alpha, max_iter, float(norm)
    raise ConvergenceError(
        f"association solver: no convergence in {max_iter} iterations "
        f"(score norm {norm:.3e})", iterations=max_iter, final_norm=float(norm))
