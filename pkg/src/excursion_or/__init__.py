"""Moderated causal excursion effects on the odds-ratio scale for MRTs."""

from .data import (
    AnalysisSpec,
    MrtDataset,
    RecordView,
    ReferencePolicy,
    SubjectView,
    compute_weight,
    excursion_weights,
    from_arrays,
    load_dataset,
    read_mrt_csv,
    uniform_omega,
    validate_dataset,
)
from .errors import (
    ConvergenceError,
    DomainError,
    EligibilityViolation,
    ExcursionError,
    FileFormatError,
    InsufficientDataError,
    NumericalError,
    PositivityError,
    PositivityViolation,
    ScenarioError,
    ShapeError,
    SingularError,
    SpecError,
    StudyError,
    ValidationReport,
    Violation,
)
from .estimator_gr import (
    estimate_gr,
    solve_gr,
    solve_gr_generalized,
    ugr_eval,
    ugr_prelim_eval,
    variance_gr,
    variance_gr_generalized,
)
from .estimator_sr import (
    RandomizationHeterogeneityWarning,
    estimate_sr,
    solve_sr,
    usr_eval,
    usr_jacobian,
    usr_prelim_eval,
    variance_sr,
)
from .features import (
    Covariate,
    FeatureSpec,
    Intercept,
    Interaction,
    SplineBasisTerm,
    build_feature,
    resolve_spec,
)
from .glm import PenalizedLogisticFit, fit_penalized_logistic, fit_with_gcv
from .links import LOGIT, PROBIT, LinkFunction, get_link, link_eval
from .measures import EffectMeasures, effect_measures
from .nuisance import (
    NuisanceSet,
    NuisanceSpec,
    build_frame,
    evaluate_nuisances,
    fit_alpha,
    fit_m,
    fit_mu,
    fit_nuisances,
    fit_r,
)
from .results import EstimateResult, SolverInfo, StackedSystem, Z_CRIT
from .simulator import (
    S1Params,
    SimScenario,
    derive_seed,
    gen_s1,
    gen_s2,
    gen_scenario,
    mc_marginal_cee_s2,
    pooled_logistic_comparator,
    q22,
    splitmix64,
    true_marginal_cee_s2,
)
from .splines import bspline_basis, quantile_knots
from .study import MetricRow, StudyDesign, StudyMetrics, build_study_design, run_study

__version__ = "0.1.0"
