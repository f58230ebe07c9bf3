"""Replication studies: designs per scenario, parallel execution, metrics.

Each replication derives its own counter-based RNG seed from the master seed
and the replication index, so replications are independent of how they are
scheduled; results are merged by replication index and the aggregated
metrics are identical for any worker count.

The analysis designs encode the four nuisance implementations:

    A: every working model includes smooths of both t and X
    B: the untreated-association model r (and the association model g)
       drop t; the treatment model m keeps both
    C: the treatment model m drops t; r and g keep both
    D: every model drops t

The S1 family is analyzed with the linear moderation model f = (1, X); the
S2 family with the marginal model f = 1, where the randomization depends on
a covariate the analysis never sees.  The comparator always uses raw linear
terms, which is exactly why it is biased when the effect or the nuisances
are not linear on its scale.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import AnalysisSpec, MrtDataset, ReferencePolicy, uniform_omega
from .errors import (
    ConvergenceError,
    InsufficientDataError,
    NumericalError,
    PositivityError,
    SingularError,
    SpecError,
    StudyError,
)
from .estimator_gr import estimate_gr
from .estimator_sr import estimate_sr
from .features import Covariate, FeatureSpec, Intercept, Interaction, SplineBasisTerm
from .nuisance import NuisanceSpec
from .results import EstimateResult
from .simulator import (
    SimScenario,
    derive_seed,
    gen_scenario,
    pooled_logistic_comparator,
    s1_true_beta,
    true_marginal_cee_s2,
)

_REP_ERRORS = (ConvergenceError, SingularError, NumericalError,
               InsufficientDataError, PositivityError)

KNOWN_ESTIMATORS = ("SR", "GR", "GRGeneralized", "GEE")


def _smooth(name: str) -> SplineBasisTerm:
    return SplineBasisTerm(name, degree=3, drop_first=True)


def _smooth_full(name: str) -> SplineBasisTerm:
    return SplineBasisTerm(name, degree=3, drop_first=False)


def _fs(*terms) -> FeatureSpec:
    return FeatureSpec(tuple(terms))


@dataclass(frozen=True)
class StudyDesign:
    """Everything a replication needs besides the data."""

    analysis: AnalysisSpec
    nuisance: NuisanceSpec
    comparator_spec: FeatureSpec
    truth: dict[str, float]              # estimator coefficient -> true value
    comparator_truth: dict[str, float]   # comparator coefficient -> true value


def build_study_design(scenario: SimScenario) -> StudyDesign:
    """The analysis configuration used for a scenario's replications."""
    one = Intercept()
    if scenario.family == "S1":
        with_t = scenario.implementation in ("A", "B", "C")
        r_terms = [one, _smooth("X")]
        m_terms = [one, _smooth("X")]
        g_terms = [one, _smooth("X")]
        mu_terms = [one, _smooth("X"), Interaction(Covariate("a"), _smooth_full("X"))]
        if scenario.implementation == "A":
            r_terms.insert(1, _smooth("t"))
            g_terms.insert(1, _smooth("t"))
            mu_terms.insert(1, _smooth("t"))
            mu_terms.append(Interaction(Covariate("a"), _smooth("t")))
        elif scenario.implementation == "B":
            pass  # r and g drop t; m keeps it
        elif scenario.implementation == "C":
            r_terms.insert(1, _smooth("t"))
            g_terms.insert(1, _smooth("t"))
        if scenario.implementation in ("A", "B"):
            m_terms.insert(1, _smooth("t"))

        f_spec = _fs(one, Covariate("X"))
        analysis = AnalysisSpec(
            delta=1,
            omega=uniform_omega(scenario.T, 1),
            f_spec=f_spec,
            g_spec=_fs(*g_terms),
            policy=ReferencePolicy.same_as_trial(),
        )
        nuisance = NuisanceSpec(r=_fs(*r_terms), m=_fs(*m_terms), mu=_fs(*mu_terms))
        beta0, beta1 = s1_true_beta(scenario)
        if scenario.implementation == "A":
            comparator = _fs(one, Covariate("t"), Covariate("X"), Covariate("a"),
                             Interaction(Covariate("a"), Covariate("t")),
                             Interaction(Covariate("a"), Covariate("X")))
        else:
            comparator = _fs(one, Covariate("X"), Covariate("a"),
                             Interaction(Covariate("a"), Covariate("X")))
        return StudyDesign(
            analysis=analysis,
            nuisance=nuisance,
            comparator_spec=comparator,
            truth={"(Intercept)": beta0, "X": beta1},
            comparator_truth={"a": beta0, "a:X": beta1},
        )

    # S2: marginal analysis; the moderator set is empty.
    truth_value = 0.0 if scenario.null_effect else true_marginal_cee_s2(scenario.variant, scenario.T)
    g_terms = [one] if scenario.null_effect else [one, _smooth("t")]
    analysis = AnalysisSpec(
        delta=1,
        omega=uniform_omega(scenario.T, 1),
        f_spec=_fs(one),
        g_spec=_fs(*g_terms),
        policy=ReferencePolicy.same_as_trial(),
    )
    nuisance = NuisanceSpec(
        r=_fs(one, _smooth("t")),
        m=_fs(one, _smooth("t")),
        mu=_fs(one, _smooth("t"), Interaction(Covariate("a"), _smooth_full("t"))),
    )
    comparator = _fs(one, Covariate("t"), Covariate("a"))
    return StudyDesign(
        analysis=analysis,
        nuisance=nuisance,
        comparator_spec=comparator,
        truth={"(Intercept)": truth_value},
        comparator_truth={"a": truth_value},
    )


def _estimate_with(tag, ds: MrtDataset, design: StudyDesign) -> EstimateResult:
    if callable(tag):
        return tag(ds, design)
    if tag == "SR":
        spec = replace(design.analysis, estimator="SR")
        return estimate_sr(ds, spec, design.nuisance)
    if tag in ("GR", "GRGeneralized"):
        spec = replace(design.analysis, estimator=tag)
        return estimate_gr(ds, spec, design.nuisance)
    if tag == "GEE":
        return pooled_logistic_comparator(ds, design.comparator_spec)
    raise SpecError(f"unknown estimator {tag!r}; choose from {KNOWN_ESTIMATORS}")


def _estimator_label(tag) -> str:
    return tag if isinstance(tag, str) else getattr(tag, "__name__", str(tag))


def _run_replication(scenario: SimScenario, estimators, rep: int,
                     design: StudyDesign | None = None) -> dict:
    if design is None:
        design = build_study_design(scenario)
    ds = gen_scenario(scenario.with_seed(derive_seed(scenario.seed, rep)))
    out: dict = {}
    for tag in estimators:
        label = _estimator_label(tag)
        try:
            res = _estimate_with(tag, ds, design)
        except _REP_ERRORS as exc:
            out[label] = {"error": f"{type(exc).__name__}: {exc}"}
            continue
        out[label] = {
            "names": list(res.coef_names),
            "beta": res.beta.tolist(),
            "se": res.std_errors.tolist(),
            "lo": res.ci_lower.tolist(),
            "hi": res.ci_upper.tolist(),
        }
    return out


def _worker(args) -> tuple[int, dict]:
    scenario, estimators, rep = args
    return rep, _run_replication(scenario, estimators, rep)


@dataclass(frozen=True)
class MetricRow:
    scenario: str
    implementation: str
    estimator: str
    coefficient: str
    n: int
    reps: int
    bias: float
    bias_mc_se: float
    mse: float
    mse_mc_se: float
    coverage: float
    coverage_mc_se: float
    failures: int


CSV_COLUMNS = ("scenario", "implementation", "estimator", "coefficient", "n", "reps",
               "bias", "bias_mc_se", "mse", "coverage", "coverage_mc_se", "failures")


@dataclass(frozen=True)
class StudyMetrics:
    scenario: SimScenario
    rows: tuple[MetricRow, ...]

    def row(self, estimator: str, coefficient: str) -> MetricRow:
        for r in self.rows:
            if r.estimator == estimator and r.coefficient == coefficient:
                return r
        raise KeyError((estimator, coefficient))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow([
                    r.scenario, r.implementation, r.estimator, r.coefficient,
                    r.n, r.reps, repr(r.bias), repr(r.bias_mc_se), repr(r.mse),
                    repr(r.coverage), repr(r.coverage_mc_se), r.failures,
                ])


def scenario_label(scenario: SimScenario) -> str:
    label = f"{scenario.family}-{scenario.variant}"
    return label + "-null" if scenario.null_effect else label


def run_study(scenario: SimScenario, estimators=("SR", "GR"), reps: int = 500,
              threads: int = 1, design: StudyDesign | None = None,
              max_failure_share: float = 0.05) -> StudyMetrics:
    """Run ``reps`` replications and aggregate bias, MSE, and coverage.

    Replications that fail with a solver or data error are counted and
    excluded; more than ``max_failure_share`` of them failing for any
    estimator aborts with StudyError.  Results are keyed by replication
    index, so any ``threads`` value yields identical metrics.
    """
    if reps < 2:
        raise SpecError("need at least 2 replications to report Monte Carlo SEs")
    custom_design = design is not None
    if design is None:
        design = build_study_design(scenario)
    labels = [_estimator_label(t) for t in estimators]
    if len(set(labels)) != len(labels):
        raise SpecError(f"estimator labels must be unique, got {labels}")

    if threads > 1:
        if any(callable(t) for t in estimators):
            raise SpecError("custom estimator callables require threads=1")
        if custom_design:
            raise SpecError("a custom study design requires threads=1")
        args = [(scenario, tuple(estimators), rep) for rep in range(reps)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            by_rep = dict(pool.map(_worker, args, chunksize=max(1, reps // (8 * threads))))
        per_rep = [by_rep[rep] for rep in range(reps)]
    else:
        per_rep = [_run_replication(scenario, estimators, rep, design) for rep in range(reps)]

    rows: list[MetricRow] = []
    label_str = scenario_label(scenario)
    for tag, label in zip(estimators, labels):
        ok = [r[label] for r in per_rep if "error" not in r[label]]
        failures = reps - len(ok)
        if failures > max_failure_share * reps:
            examples = [r[label]["error"] for r in per_rep if "error" in r[label]][:3]
            raise StudyError(
                f"{label}: {failures}/{reps} replications failed "
                f"(first errors: {examples})")
        if not ok:
            raise StudyError(f"{label}: no successful replications")
        names = ok[0]["names"]
        truth_map = design.comparator_truth if label == "GEE" else design.truth
        for j, coef in enumerate(names):
            if coef not in truth_map:
                continue
            truth = truth_map[coef]
            est = np.array([r["beta"][j] for r in ok])
            lo = np.array([r["lo"][j] for r in ok])
            hi = np.array([r["hi"][j] for r in ok])
            m = len(ok)
            errors = est - truth
            covered = (lo <= truth) & (truth <= hi)
            sq = np.square(errors)
            cov = float(covered.mean())
            rows.append(MetricRow(
                scenario=label_str,
                implementation=scenario.implementation,
                estimator=label,
                coefficient=coef,
                n=scenario.n,
                reps=m,
                bias=float(errors.mean()),
                bias_mc_se=float(est.std(ddof=1) / np.sqrt(m)),
                mse=float(sq.mean()),
                mse_mc_se=float(sq.std(ddof=1) / np.sqrt(m)),
                coverage=cov,
                coverage_mc_se=float(np.sqrt(cov * (1.0 - cov) / m)),
                failures=failures,
            ))
    return StudyMetrics(scenario=scenario, rows=tuple(rows))
