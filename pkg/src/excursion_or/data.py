"""Trial data containers, validation, reference policies, and excursion weights.

A micro-randomized trial is stored as rectangular per-subject arrays: each of
``n`` subjects contributes exactly ``T`` decision points.  Per record we keep
the availability indicator, the realized treatment, its randomization
probability, the (pre-aligned) proximal outcome for the chosen window, and
any state covariates.

The excursion weight at decision ``t`` compares a reference treatment policy
``pi`` against the trial's randomization over the remainder of the window:

    W_t = prod_{u=t+1}^{t+delta-1} (pi_u/p_u)^{A_u} ((1-pi_u)/(1-p_u))^{1-A_u}

with the empty product (delta = 1) equal to one, and unavailable
intermediate points contributing a factor of one (no treatment was possible,
so both policies agree there).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DomainError,
    EligibilityViolation,
    FileFormatError,
    PositivityError,
    PositivityViolation,
    ShapeError,
    SpecError,
    ValidationReport,
    Violation,
)
from .features import FeatureSpec
from .links import LOGIT, LinkFunction

REQUIRED_COLUMNS = ("subject_id", "t", "avail", "a", "prob", "y")
RESERVED_NAMES = frozenset(REQUIRED_COLUMNS) | {"t", "a"}

# Band inside which an eligible randomization probability is trusted.
PROB_FLOOR = 1e-6


@dataclass(frozen=True)
class RecordView:
    """One (subject, decision point) record."""

    subject_id: object
    t: int                      # 1-based decision index
    avail: int
    treat: int
    prob: float
    outcome: float
    covariates: Mapping[str, float]


@dataclass(frozen=True)
class SubjectView:
    """One subject's full trajectory (arrays of length T)."""

    subject_id: object
    avail: np.ndarray
    treat: np.ndarray
    prob: np.ndarray
    outcome: np.ndarray
    covariates: Mapping[str, np.ndarray]

    @property
    def n_times(self) -> int:
        return self.avail.shape[0]


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class MrtDataset:
    """Validated, immutable trial data in (n_subjects, n_times) layout."""

    subject_ids: tuple
    avail: np.ndarray
    treat: np.ndarray
    prob: np.ndarray
    outcome: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_subjects(self) -> int:
        return self.avail.shape[0]

    @property
    def n_times(self) -> int:
        return self.avail.shape[1]

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(self.covariates)

    def subject(self, i: int) -> SubjectView:
        return SubjectView(
            subject_id=self.subject_ids[i],
            avail=self.avail[i],
            treat=self.treat[i],
            prob=self.prob[i],
            outcome=self.outcome[i],
            covariates={k: v[i] for k, v in self.covariates.items()},
        )

    def record(self, i: int, t: int) -> RecordView:
        j = t - 1
        if not (0 <= i < self.n_subjects) or not (0 <= j < self.n_times):
            raise ShapeError(f"record index ({i}, t={t}) outside ({self.n_subjects}, T={self.n_times})")
        return RecordView(
            subject_id=self.subject_ids[i],
            t=t,
            avail=int(self.avail[i, j]),
            treat=int(self.treat[i, j]),
            prob=float(self.prob[i, j]),
            outcome=float(self.outcome[i, j]),
            covariates={k: float(v[i, j]) for k, v in self.covariates.items()},
        )

    def column_env(self, treat_override: float | None = None,
                   mask: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Flat column environment for feature evaluation.

        ``t`` is the 1-based decision index, ``a`` the treatment column
        (optionally overridden with a constant, e.g. to predict under forced
        treatment).  ``mask`` is a flat boolean selector over the n*T records
        in row-major (subject-major) order.
        """
        n, T = self.avail.shape
        t_col = np.tile(np.arange(1, T + 1, dtype=float), n)
        if treat_override is None:
            a_col = self.treat.reshape(-1).astype(float)
        else:
            a_col = np.full(n * T, float(treat_override))
        env = {"t": t_col, "a": a_col}
        for name, arr in self.covariates.items():
            env[name] = arr.reshape(-1)
        if mask is not None:
            env = {k: v[mask] for k, v in env.items()}
        return env


def _as_2d(name: str, arr, n: int | None, T: int | None) -> np.ndarray:
    out = np.asarray(arr)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (subjects x times), got ndim={out.ndim}")
    if n is not None and out.shape != (n, T):
        raise ShapeError(f"{name} has shape {out.shape}, expected ({n}, {T})")
    return out


def from_arrays(subject_ids: Sequence, avail, treat, prob, outcome,
                covariates: Mapping[str, np.ndarray] | None = None) -> MrtDataset:
    """Build a validated dataset from per-subject arrays (strict: raises)."""
    avail_arr = _as_2d("avail", avail, None, None)
    n, T = avail_arr.shape
    if len(subject_ids) != n:
        raise ShapeError(f"{len(subject_ids)} subject ids for {n} rows")
    treat_arr = _as_2d("treat", treat, n, T)
    prob_arr = _as_2d("prob", prob, n, T).astype(float)
    outcome_arr = _as_2d("outcome", outcome, n, T)
    covs = {}
    for name, arr in (covariates or {}).items():
        if name in RESERVED_NAMES:
            raise SpecError(f"covariate name {name!r} is reserved")
        covs[name] = _frozen(_as_2d(name, arr, n, T).astype(float))
        if not np.all(np.isfinite(covs[name])):
            raise DomainError(f"covariate {name!r} contains non-finite values")

    def first_bad(mask: np.ndarray) -> tuple:
        i, j = np.argwhere(mask)[0]
        return subject_ids[i], int(j) + 1

    for name, arr in (("avail", avail_arr), ("a", treat_arr), ("y", outcome_arr)):
        if not np.isin(arr, (0, 1)).all():
            raise DomainError(f"column {name!r} must be binary 0/1")
    if not np.all(np.isfinite(prob_arr)) or prob_arr.min() < 0.0 or prob_arr.max() > 1.0:
        raise DomainError("prob must lie in [0,1]")

    bad = (avail_arr == 0) & (treat_arr == 1)
    if bad.any():
        sid, t = first_bad(bad)
        raise EligibilityViolation(f"treated while unavailable at (subject={sid!r}, t={t})")
    bad = (avail_arr == 0) & (prob_arr != 0.0)
    if bad.any():
        sid, t = first_bad(bad)
        raise EligibilityViolation(f"nonzero prob while unavailable at (subject={sid!r}, t={t})")
    bad = (avail_arr == 1) & ((prob_arr < PROB_FLOOR) | (prob_arr > 1.0 - PROB_FLOOR))
    if bad.any():
        sid, t = first_bad(bad)
        raise PositivityViolation(
            f"eligible prob outside [{PROB_FLOOR}, 1-{PROB_FLOOR}] at (subject={sid!r}, t={t})")

    return MrtDataset(
        subject_ids=tuple(subject_ids),
        avail=_frozen(avail_arr.astype(np.int8)),
        treat=_frozen(treat_arr.astype(np.int8)),
        prob=_frozen(prob_arr),
        outcome=_frozen(outcome_arr.astype(float)),
        covariates=covs,
    )


def validate_dataset(records) -> MrtDataset | ValidationReport:
    """Validate raw long-format records.

    Accepts a pandas DataFrame or an iterable of mappings with columns
    ``subject_id, t, avail, a, prob, y`` plus covariates.  Returns the
    immutable dataset when every invariant holds, otherwise a report listing
    every violation found (nothing is raised for data problems).
    """
    if isinstance(records, pd.DataFrame):
        frame = records.copy()
    else:
        frame = pd.DataFrame(list(records))

    violations: list[Violation] = []
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        violations.append(Violation("shape", None, None, f"missing column(s): {', '.join(missing)}"))
        return ValidationReport(tuple(violations))

    cov_names = [c for c in frame.columns if c not in REQUIRED_COLUMNS]
    for col in ("t", "avail", "a", "prob", "y", *cov_names):
        try:
            frame[col] = pd.to_numeric(frame[col])
        except (ValueError, TypeError):
            violations.append(Violation("domain", None, None, f"column {col!r} is not numeric"))
    if violations:
        return ValidationReport(tuple(violations))

    subject_order = list(dict.fromkeys(frame["subject_id"].tolist()))
    T = int(frame["t"].max()) if len(frame) else 0
    n = len(subject_order)
    if len(frame) == 0:
        return ValidationReport((Violation("shape", None, None, "no records"),))

    groups = {sid: sub.sort_values("t") for sid, sub in frame.groupby("subject_id", sort=False)}
    expected_t = np.arange(1, T + 1)
    for sid in subject_order:
        sub = groups[sid]
        t_vals = sub["t"].to_numpy()
        if len(t_vals) != T or not np.array_equal(t_vals, expected_t):
            violations.append(Violation(
                "shape", sid, None,
                f"expected decision points 1..{T}, got {len(t_vals)} record(s)"))
    if violations:
        return ValidationReport(tuple(violations))

    def grab(col: str) -> np.ndarray:
        return np.stack([groups[sid][col].to_numpy(dtype=float) for sid in subject_order])

    avail, treat, prob, outcome = grab("avail"), grab("a"), grab("prob"), grab("y")
    covs = {name: grab(name) for name in cov_names}

    def note(kind: str, mask: np.ndarray, message: str) -> None:
        for i, j in np.argwhere(mask):
            violations.append(Violation(kind, subject_order[i], int(j) + 1, message))

    note("domain", ~np.isin(avail, (0, 1)), "avail must be 0 or 1")
    note("domain", ~np.isin(treat, (0, 1)), "a must be 0 or 1")
    note("domain", ~np.isin(outcome, (0, 1)), "y must be 0 or 1")
    note("domain", ~np.isfinite(prob) | (prob < 0) | (prob > 1), "prob must lie in [0,1]")
    for name, arr in covs.items():
        note("domain", ~np.isfinite(arr), f"covariate {name!r} must be finite")
    if violations:
        return ValidationReport(tuple(violations))

    note("eligibility", (avail == 0) & (treat == 1), "treated while unavailable")
    note("eligibility", (avail == 0) & (prob != 0), "prob must be 0 when unavailable")
    note("positivity", (avail == 1) & ((prob < PROB_FLOOR) | (prob > 1 - PROB_FLOOR)),
         f"eligible prob outside [{PROB_FLOOR}, 1-{PROB_FLOOR}]")
    if violations:
        return ValidationReport(tuple(violations))

    return from_arrays(subject_order, avail.astype(int), treat.astype(int), prob, outcome, covs)


def read_mrt_csv(path) -> pd.DataFrame:
    """Read a long-format trial CSV; raises FileFormatError on malformed input."""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from exc
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise FileFormatError(f"{path}: missing column(s): {', '.join(missing)}")
    return frame


def load_dataset(path) -> MrtDataset | ValidationReport:
    """Read and validate a trial CSV in one step."""
    return validate_dataset(read_mrt_csv(path))


# ---------------------------------------------------------------------------
# Reference policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferencePolicy:
    """Counterfactual randomization pi_t for the rest of the excursion window.

    Kinds: ``same_as_trial`` (pi = p, so every weight is one),
    ``always_zero`` (excursions that never treat after t),
    ``constant`` (one fixed probability), and ``per_time`` (a table of length
    T indexed by decision point).
    """

    kind: str
    value: float | None = None
    table: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("same_as_trial", "always_zero", "constant", "per_time"):
            raise SpecError(f"unknown reference policy kind {self.kind!r}")
        if self.kind == "constant":
            if self.value is None or not (0.0 <= self.value <= 1.0):
                raise SpecError(f"constant policy needs a probability in [0,1], got {self.value!r}")
        if self.kind == "per_time":
            if not self.table:
                raise SpecError("per_time policy needs a non-empty probability table")
            if any((not np.isfinite(v)) or v < 0.0 or v > 1.0 for v in self.table):
                raise SpecError("per_time probabilities must lie in [0,1]")

    @classmethod
    def same_as_trial(cls) -> "ReferencePolicy":
        return cls("same_as_trial")

    @classmethod
    def always_zero(cls) -> "ReferencePolicy":
        return cls("always_zero")

    @classmethod
    def constant(cls, value: float) -> "ReferencePolicy":
        return cls("constant", value=float(value))

    @classmethod
    def per_time(cls, table: Iterable[float]) -> "ReferencePolicy":
        return cls("per_time", table=tuple(float(v) for v in table))

    def probs(self, ds: MrtDataset) -> np.ndarray:
        """Reference probabilities, shape (n_subjects, n_times); 0 when unavailable."""
        n, T = ds.avail.shape
        if self.kind == "same_as_trial":
            pi = ds.prob.copy()
        elif self.kind == "always_zero":
            pi = np.zeros((n, T))
        elif self.kind == "constant":
            pi = np.full((n, T), self.value)
        else:
            if len(self.table) != T:
                raise ShapeError(f"per_time table has {len(self.table)} entries for T={T}")
            pi = np.tile(np.asarray(self.table, dtype=float), (n, 1))
        return np.where(ds.avail == 1, pi, 0.0)


# ---------------------------------------------------------------------------
# Analysis specification
# ---------------------------------------------------------------------------

ESTIMATORS = ("SR", "GR", "GRGeneralized")


@dataclass(frozen=True)
class AnalysisSpec:
    """Everything that defines one excursion-effect analysis.

    ``omega`` weights the decision points in the estimand (nonnegative,
    summing to one); its support must leave room for a full window, i.e.
    ``delta + max{t : omega_t > 0} - 1 <= T``.
    """

    delta: int
    omega: tuple[float, ...]
    f_spec: FeatureSpec
    policy: ReferencePolicy
    g_spec: FeatureSpec | None = None
    link_h: LinkFunction = LOGIT
    link_l: LinkFunction = LOGIT
    estimator: str = "SR"

    def __post_init__(self) -> None:
        if self.delta < 1:
            raise SpecError(f"delta must be >= 1, got {self.delta}")
        if self.estimator not in ESTIMATORS:
            raise SpecError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        omega = np.asarray(self.omega, dtype=float)
        if omega.ndim != 1 or omega.size == 0:
            raise SpecError("omega must be a non-empty vector")
        if np.any(omega < 0) or not np.all(np.isfinite(omega)):
            raise SpecError("omega entries must be finite and nonnegative")
        if abs(omega.sum() - 1.0) > 1e-8:
            raise SpecError(f"omega must sum to 1, got {omega.sum()!r}")
        support = np.nonzero(omega > 0)[0]
        t_max = int(support[-1]) + 1
        if self.delta + t_max - 1 > omega.size:
            raise SpecError(
                f"window overruns the trial: delta={self.delta} with omega support "
                f"up to t={t_max} needs T >= {self.delta + t_max - 1}, have T={omega.size}")
        object.__setattr__(self, "omega", tuple(float(w) for w in omega))

    @property
    def n_times(self) -> int:
        return len(self.omega)

    def omega_array(self) -> np.ndarray:
        return np.asarray(self.omega, dtype=float)


def uniform_omega(T: int, delta: int = 1) -> tuple[float, ...]:
    """Equal weight over every decision point with a complete window."""
    if T < delta:
        raise SpecError(f"T={T} cannot fit a window of delta={delta}")
    m = T - delta + 1
    return tuple([1.0 / m] * m + [0.0] * (delta - 1))


# ---------------------------------------------------------------------------
# Excursion weights
# ---------------------------------------------------------------------------

def _window_factors(avail, treat, prob, pi) -> np.ndarray:
    """Per-record policy/trial likelihood ratios; 1 where unavailable."""
    factors = np.ones_like(prob, dtype=float)
    el1 = (avail == 1) & (treat == 1)
    el0 = (avail == 1) & (treat == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        if el1.any():
            factors[el1] = pi[el1] / prob[el1]
        if el0.any():
            factors[el0] = (1.0 - pi[el0]) / (1.0 - prob[el0])
    bad = (avail == 1) & ~np.isfinite(factors)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise PositivityError(
            f"weight factor divides by zero at flat index {tuple(int(v) for v in idx)}")
    return factors


def excursion_weights(ds: MrtDataset, spec: AnalysisSpec) -> np.ndarray:
    """Excursion weights W_t for every record, shape (n_subjects, n_times).

    Decision points whose window would run past the end of the trial get
    NaN; estimation masks them out (and counts them).
    """
    if ds.n_times != spec.n_times:
        raise ShapeError(f"omega has length {spec.n_times} but the trial has T={ds.n_times}")
    n, T = ds.avail.shape
    delta = spec.delta
    pi = spec.policy.probs(ds)
    factors = _window_factors(ds.avail, ds.treat, ds.prob, pi)
    m = T - delta + 1
    weights = np.full((n, T), np.nan)
    weights[:, :m] = 1.0
    for k in range(1, delta):
        weights[:, :m] *= factors[:, k:k + m]
    return weights


def compute_weight(subject: SubjectView, t: int, spec: AnalysisSpec) -> float:
    """Excursion weight for one subject at decision point ``t`` (1-based)."""
    T = subject.n_times
    if not (1 <= t <= T):
        raise ShapeError(f"t={t} outside 1..{T}")
    if t + spec.delta - 1 > T:
        raise ShapeError(f"window [t+1, t+delta-1] runs past T={T} for t={t}, delta={spec.delta}")
    if spec.delta == 1:
        return 1.0
    sl = slice(t, t + spec.delta - 1)  # 0-based indices t .. t+delta-2, i.e. times t+1 .. t+delta-1
    avail, treat, prob = subject.avail[sl], subject.treat[sl], subject.prob[sl]
    if spec.policy.kind == "same_as_trial":
        pi = prob.astype(float)
    elif spec.policy.kind == "always_zero":
        pi = np.zeros_like(prob, dtype=float)
    elif spec.policy.kind == "constant":
        pi = np.full(prob.shape, spec.policy.value)
    else:
        if len(spec.policy.table) != T:
            raise ShapeError(f"per_time table has {len(spec.policy.table)} entries for T={T}")
        pi = np.asarray(spec.policy.table, dtype=float)[sl]
    pi = np.where(avail == 1, pi, 0.0)
    return float(np.prod(_window_factors(avail, treat, prob, pi)))
