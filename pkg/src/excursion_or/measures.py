"""Effect measures comparing two success probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError


@dataclass(frozen=True)
class EffectMeasures:
    """Risk difference, log risk ratio, and log odds ratio for (p1, p0)."""

    risk_difference: float
    log_risk_ratio: float
    log_odds_ratio: float


def effect_measures(p1: float, p0: float) -> EffectMeasures:
    """All three effect measures for success probabilities p1 (treated) and p0.

    Both probabilities must lie strictly inside (0,1); ratios and odds are
    undefined at the boundary.
    """
    for name, p in (("p1", p1), ("p0", p0)):
        if not np.isfinite(p) or p <= 0.0 or p >= 1.0:
            raise DomainError(f"{name} must lie in (0,1), got {p!r}")
    return EffectMeasures(
        risk_difference=float(p1 - p0),
        log_risk_ratio=float(np.log(p1 / p0)),
        log_odds_ratio=float(special.logit(p1) - special.logit(p0)),
    )
