"""Feature specifications: typed terms compiled to design matrix columns.

A :class:`FeatureSpec` is an ordered tuple of terms.  Terms are evaluated
against a column environment, a mapping from column name to a flat float
array; the decision index is exposed under the reserved name ``"t"`` and the
treatment indicator under ``"a"``, so mean models can include treatment main
effects and treatment-by-covariate products.

Spline terms may defer their knot locations (``knots=None``); call
:func:`resolve_spec` once per dataset to pin them at empirical quantiles so
fitting and prediction share one basis.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Union

import numpy as np

from .errors import SpecError
from .splines import bspline_basis, quantile_knots

ColumnEnv = Mapping[str, np.ndarray]


def _lookup(env: ColumnEnv, name: str) -> np.ndarray:
    try:
        return np.asarray(env[name], dtype=float)
    except KeyError:
        raise SpecError(f"unknown column {name!r}; available: {sorted(env)}") from None


@dataclass(frozen=True)
class Intercept:
    def n_cols(self) -> int:
        return 1

    def names(self) -> list[str]:
        return ["(Intercept)"]

    def penalized(self) -> list[bool]:
        return [False]

    def columns(self, env: ColumnEnv) -> np.ndarray:
        n = len(next(iter(env.values())))
        return np.ones((n, 1))


@dataclass(frozen=True)
class Covariate:
    name: str

    def n_cols(self) -> int:
        return 1

    def names(self) -> list[str]:
        return [self.name]

    def penalized(self) -> list[bool]:
        return [False]

    def columns(self, env: ColumnEnv) -> np.ndarray:
        return _lookup(env, self.name)[:, None]


@dataclass(frozen=True)
class SplineBasisTerm:
    """Clamped B-spline expansion of one column.

    ``drop_first`` removes the first basis function, which is the standard
    way to combine a spline block with an explicit intercept (the full basis
    sums to one and would be collinear with it).
    """

    name: str
    knots: tuple[float, ...] | None = None
    degree: int = 3
    drop_first: bool = False
    n_interior: int = 8

    def _require_knots(self) -> tuple[float, ...]:
        if self.knots is None:
            raise SpecError(
                f"spline term on {self.name!r} has unresolved knots; "
                "call resolve_spec against a dataset first")
        return self.knots

    def n_cols(self) -> int:
        k = len(self._require_knots()) + self.degree - 1
        return k - 1 if self.drop_first else k

    def names(self) -> list[str]:
        start = 1 if self.drop_first else 0
        return [f"bs({self.name})[{j}]" for j in range(start, start + self.n_cols())]

    def penalized(self) -> list[bool]:
        return [True] * self.n_cols()

    def columns(self, env: ColumnEnv) -> np.ndarray:
        basis = bspline_basis(_lookup(env, self.name), self._require_knots(), self.degree)
        return basis[:, 1:] if self.drop_first else basis


@dataclass(frozen=True)
class Interaction:
    """Columnwise product of two terms (all left-by-right column pairs)."""

    left: "Term"
    right: "Term"

    def n_cols(self) -> int:
        return self.left.n_cols() * self.right.n_cols()

    def names(self) -> list[str]:
        return [f"{ln}:{rn}" for ln in self.left.names() for rn in self.right.names()]

    def penalized(self) -> list[bool]:
        pl, pr = self.left.penalized(), self.right.penalized()
        return [a or b for a in pl for b in pr]

    def columns(self, env: ColumnEnv) -> np.ndarray:
        cl, cr = self.left.columns(env), self.right.columns(env)
        n = cl.shape[0]
        return np.einsum("nk,nm->nkm", cl, cr).reshape(n, -1)


Term = Union[Intercept, Covariate, SplineBasisTerm, Interaction]


@dataclass(frozen=True)
class FeatureSpec:
    """An ordered collection of terms defining one design matrix."""

    terms: tuple[Term, ...]

    def __post_init__(self) -> None:
        if not self.terms:
            raise SpecError("a feature spec needs at least one term")

    @property
    def dim(self) -> int:
        return sum(term.n_cols() for term in self.terms)

    def column_names(self) -> list[str]:
        names: list[str] = []
        for term in self.terms:
            names.extend(term.names())
        return names

    def penalized_mask(self) -> np.ndarray:
        mask: list[bool] = []
        for term in self.terms:
            mask.extend(term.penalized())
        return np.array(mask, dtype=bool)

    def design(self, env: ColumnEnv) -> np.ndarray:
        """Design matrix (rows = env length, columns = self.dim)."""
        blocks = [term.columns(env) for term in self.terms]
        return np.concatenate(blocks, axis=1) if len(blocks) > 1 else blocks[0]


def _resolve_term(term: Term, env: ColumnEnv) -> Term:
    if isinstance(term, SplineBasisTerm) and term.knots is None:
        knots = quantile_knots(_lookup(env, term.name), term.n_interior)
        return replace(term, knots=tuple(float(k) for k in knots))
    if isinstance(term, Interaction):
        return Interaction(_resolve_term(term.left, env), _resolve_term(term.right, env))
    return term


def resolve_spec(spec: FeatureSpec, env: ColumnEnv) -> FeatureSpec:
    """Pin any deferred spline knots at empirical quantiles of ``env``."""
    return FeatureSpec(tuple(_resolve_term(t, env) for t in spec.terms))


def build_feature(spec: FeatureSpec, record) -> np.ndarray:
    """Evaluate the spec for a single record, returning a 1-D vector.

    ``record`` needs ``t``, ``treat`` and a ``covariates`` mapping (any
    object with those attributes works, in particular a RecordView).
    """
    env = {"t": np.array([float(record.t)]), "a": np.array([float(record.treat)])}
    for name, value in record.covariates.items():
        env[name] = np.array([float(value)])
    return spec.design(env)[0]
