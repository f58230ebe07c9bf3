"""Result containers for estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

# Two-sided 95% normal critical value, fixed so intervals are reproducible.
Z_CRIT = 1.959964


@dataclass(frozen=True)
class SolverInfo:
    iterations: int
    final_norm: float
    converged: bool


@dataclass(frozen=True)
class StackedSystem:
    """Joint estimating system for the stacked (beta, alpha) sandwich."""

    phi_dim: int
    bread: np.ndarray        # subject-mean Jacobian of the stacked system
    meat: np.ndarray         # subject-mean outer product of stacked scores
    full_vcov: np.ndarray    # sandwich for the full parameter, already / n


@dataclass(frozen=True)
class EstimateResult:
    """Point estimates with a sandwich variance and 95% normal intervals."""

    estimator: str
    coef_names: tuple[str, ...]
    beta: np.ndarray
    vcov: np.ndarray
    std_errors: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    solver: SolverInfo
    n_subjects: int | None = None
    n_records_excluded: int | None = None

    @property
    def z_values(self) -> np.ndarray:
        return self.beta / self.std_errors

    @property
    def p_values(self) -> np.ndarray:
        from scipy.special import ndtr
        return 2.0 * ndtr(-np.abs(self.z_values))


def finalize_vcov(vcov: np.ndarray) -> np.ndarray:
    """Symmetrize and check positive semidefiniteness (eigenvalues >= -1e-10)."""
    if not np.all(np.isfinite(vcov)):
        raise NumericalError("variance matrix contains non-finite entries")
    asym = np.max(np.abs(vcov - vcov.T)) if vcov.size else 0.0
    scale = max(1.0, float(np.max(np.abs(vcov)))) if vcov.size else 1.0
    if asym > 1e-8 * scale:
        raise NumericalError(f"variance matrix asymmetric beyond tolerance ({asym:.3e})")
    sym = 0.5 * (vcov + vcov.T)
    eigs = np.linalg.eigvalsh(sym)
    if eigs.size and eigs.min() < -1e-10:
        raise NumericalError(f"variance matrix has negative eigenvalue {eigs.min():.3e}")
    return sym


def make_result(estimator: str, coef_names, beta: np.ndarray, vcov: np.ndarray,
                solver: SolverInfo, n_subjects: int | None = None,
                n_records_excluded: int | None = None) -> EstimateResult:
    vcov = finalize_vcov(np.asarray(vcov, dtype=float))
    se = np.sqrt(np.clip(np.diag(vcov), 0.0, None))
    beta = np.asarray(beta, dtype=float)
    return EstimateResult(
        estimator=estimator,
        coef_names=tuple(coef_names),
        beta=beta,
        vcov=vcov,
        std_errors=se,
        ci_lower=beta - Z_CRIT * se,
        ci_upper=beta + Z_CRIT * se,
        solver=solver,
        n_subjects=n_subjects,
        n_records_excluded=n_records_excluded,
    )
