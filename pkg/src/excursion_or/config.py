"""Run configuration: JSON parsing and assembly of analysis objects.

The configuration file carries one section per subcommand plus shared
settings (seed, threads).  Feature terms use a small typed schema:

    {"type": "intercept"}
    {"type": "covariate", "name": "X"}
    {"type": "spline", "name": "X", "degree": 3, "knots": [0.0, ...] | null,
     "n_interior": 8, "drop_first": true}
    {"type": "interaction", "left": {...}, "right": {...}}

Spline knots left null are pinned at empirical quantiles of the analyzed
dataset.  ``omega`` is either the string "uniform" or an explicit vector of
length T.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .data import AnalysisSpec, ReferencePolicy, uniform_omega
from .errors import FileFormatError, SpecError
from .features import Covariate, FeatureSpec, Intercept, Interaction, SplineBasisTerm, Term
from .glm import DEFAULT_LAMBDA_GRID
from .links import get_link
from .nuisance import NuisanceSpec
from .simulator import S1Params, SimScenario


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration file; sections stay as dictionaries until used."""

    command: str | None = None
    seed: int | None = None
    threads: int | None = None
    analyze: dict | None = None
    simulate: dict | None = None
    oracle: dict | None = None
    validate: dict | None = None

    def to_dict(self) -> dict:
        out: dict = {}
        for key, value in asdict(self).items():
            if value is not None:
                out[key] = value
        return out


_TOP_KEYS = {"command", "seed", "threads", "analyze", "simulate", "oracle", "validate"}


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise SpecError("configuration must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise SpecError(f"unknown configuration key(s): {sorted(unknown)}")
    for key in ("analyze", "simulate", "oracle", "validate"):
        if key in raw and not isinstance(raw[key], dict):
            raise SpecError(f"section {key!r} must be an object")
    if "seed" in raw and not isinstance(raw["seed"], int):
        raise SpecError("seed must be an integer")
    if "threads" in raw and not isinstance(raw["threads"], int):
        raise SpecError("threads must be an integer")
    return RunConfig(
        command=raw.get("command"),
        seed=raw.get("seed"),
        threads=raw.get("threads"),
        analyze=raw.get("analyze"),
        simulate=raw.get("simulate"),
        oracle=raw.get("oracle"),
        validate=raw.get("validate"),
    )


def load_config(path) -> RunConfig:
    try:
        with open(path) as handle:
            raw = json.load(handle)
    except OSError as exc:
        raise FileFormatError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SpecError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def save_config(config: RunConfig, path) -> None:
    with open(path, "w") as handle:
        json.dump(config.to_dict(), handle, indent=2, sort_keys=True)
        handle.write("\n")


# ---------------------------------------------------------------------------
# Term schema
# ---------------------------------------------------------------------------

def parse_term(raw: dict) -> Term:
    if not isinstance(raw, dict) or "type" not in raw:
        raise SpecError(f"term must be an object with a 'type', got {raw!r}")
    kind = raw["type"]
    if kind == "intercept":
        return Intercept()
    if kind == "covariate":
        if "name" not in raw:
            raise SpecError("covariate term needs a 'name'")
        return Covariate(str(raw["name"]))
    if kind == "spline":
        if "name" not in raw:
            raise SpecError("spline term needs a 'name'")
        knots = raw.get("knots")
        return SplineBasisTerm(
            name=str(raw["name"]),
            knots=None if knots is None else tuple(float(k) for k in knots),
            degree=int(raw.get("degree", 3)),
            drop_first=bool(raw.get("drop_first", False)),
            n_interior=int(raw.get("n_interior", 8)),
        )
    if kind == "interaction":
        if "left" not in raw or "right" not in raw:
            raise SpecError("interaction term needs 'left' and 'right'")
        return Interaction(parse_term(raw["left"]), parse_term(raw["right"]))
    raise SpecError(f"unknown term type {kind!r}")


def parse_feature_spec(raw) -> FeatureSpec:
    if not isinstance(raw, list) or not raw:
        raise SpecError("a feature spec must be a non-empty list of terms")
    return FeatureSpec(tuple(parse_term(t) for t in raw))


def parse_policy(raw) -> ReferencePolicy:
    if raw is None:
        return ReferencePolicy.same_as_trial()
    if not isinstance(raw, dict) or "kind" not in raw:
        raise SpecError("policy must be an object with a 'kind'")
    kind = raw["kind"]
    if kind == "same_as_trial":
        return ReferencePolicy.same_as_trial()
    if kind == "always_zero":
        return ReferencePolicy.always_zero()
    if kind == "constant":
        if "value" not in raw:
            raise SpecError("constant policy needs a 'value'")
        return ReferencePolicy.constant(float(raw["value"]))
    if kind == "per_time":
        if "table" not in raw:
            raise SpecError("per_time policy needs a 'table'")
        return ReferencePolicy.per_time(raw["table"])
    raise SpecError(f"unknown policy kind {kind!r}")


# ---------------------------------------------------------------------------
# Section builders
# ---------------------------------------------------------------------------

def build_analysis(section: dict, T: int) -> tuple[AnalysisSpec, NuisanceSpec]:
    """Turn the 'analyze' section into an AnalysisSpec and NuisanceSpec.

    ``T`` is the trial length of the dataset being analyzed (needed when
    omega is "uniform").
    """
    if "f" not in section:
        raise SpecError("analyze section needs moderation terms under 'f'")
    estimator = section.get("estimator", "SR")
    delta = int(section.get("delta", 1))
    omega_raw = section.get("omega", "uniform")
    if omega_raw == "uniform":
        omega = uniform_omega(T, delta)
    elif isinstance(omega_raw, list):
        omega = tuple(float(w) for w in omega_raw)
    else:
        raise SpecError("omega must be 'uniform' or a list of weights")
    g_spec = parse_feature_spec(section["g"]) if "g" in section else None
    spec = AnalysisSpec(
        delta=delta,
        omega=omega,
        f_spec=parse_feature_spec(section["f"]),
        g_spec=g_spec,
        policy=parse_policy(section.get("policy")),
        link_h=get_link(section.get("link_h", "logit")),
        link_l=get_link(section.get("link_l", "logit")),
        estimator=estimator,
    )
    nraw = section.get("nuisance", {})
    if not isinstance(nraw, dict):
        raise SpecError("'nuisance' must be an object")
    nuisance = NuisanceSpec(
        r=parse_feature_spec(nraw["r"]) if "r" in nraw else None,
        m=parse_feature_spec(nraw["m"]) if "m" in nraw else None,
        mu=parse_feature_spec(nraw["mu"]) if "mu" in nraw else None,
        lambda_grid=tuple(float(l) for l in nraw.get("lambda_grid", DEFAULT_LAMBDA_GRID)),
    )
    return spec, nuisance


def build_scenario(section: dict, seed_override: int | None = None) -> SimScenario:
    """Turn the 'simulate' section into a SimScenario."""
    for key in ("family", "variant", "n"):
        if key not in section:
            raise SpecError(f"simulate section needs {key!r}")
    params_raw = section.get("params", {})
    if not isinstance(params_raw, dict):
        raise SpecError("'params' must be an object")
    allowed = {"beta0", "beta1", "gamma0", "gamma1", "h2_t_coef"}
    unknown = set(params_raw) - allowed
    if unknown:
        raise SpecError(f"unknown scenario parameter(s): {sorted(unknown)}")
    seed = seed_override if seed_override is not None else int(section.get("seed", 0))
    return SimScenario(
        family=str(section["family"]),
        variant=str(section["variant"]),
        n=int(section["n"]),
        T=int(section.get("T", 20)),
        seed=seed,
        implementation=str(section.get("implementation", "A")),
        params=S1Params(**{k: float(v) for k, v in params_raw.items()}),
        null_effect=bool(section.get("null_effect", False)),
    )
