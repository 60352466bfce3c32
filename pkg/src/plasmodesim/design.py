"""Design terms and their evaluation against a dataset.

A design term is written as a short string:

* ``W1``        a named covariate
* ``A``         the treatment indicator
* ``W1*W2``     a product of factors (``A`` may appear as a factor)
* ``W1^2``      a power of a covariate (``W1^2`` is the same as ``W1*W1``)
* ``W1>0.2``    a threshold indicator ``1{W1 > 0.2}``
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

TREATMENT = "A"

_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


class DesignError(ValueError):
    """Raised for malformed or unresolvable design terms."""


@dataclass(frozen=True)
class Term:
    factors: tuple[str, ...]
    threshold: float | None = None

    def __post_init__(self):
        if not self.factors:
            raise DesignError("a design term needs at least one factor")
        if self.threshold is not None and len(self.factors) != 1:
            raise DesignError("threshold terms take exactly one covariate")
        if self.threshold is not None and self.factors[0] == TREATMENT:
            raise DesignError("threshold on the treatment indicator is not supported")

    @property
    def has_treatment(self) -> bool:
        return TREATMENT in self.factors

    @property
    def covariates(self) -> tuple[str, ...]:
        return tuple(f for f in self.factors if f != TREATMENT)

    @property
    def label(self) -> str:
        if self.threshold is not None:
            return f"{self.factors[0]}>{_fmt_number(self.threshold)}"
        parts = []
        for name in dict.fromkeys(self.factors):
            k = self.factors.count(name)
            parts.append(name if k == 1 else f"{name}^{k}")
        return "*".join(parts)

    def __str__(self) -> str:
        return self.label

    def evaluate(self, columns: dict[str, np.ndarray], a: np.ndarray) -> np.ndarray:
        if self.threshold is not None:
            return (columns[self.factors[0]] > self.threshold).astype(float)
        out = None
        for f in self.factors:
            col = a if f == TREATMENT else columns[f]
            out = col.astype(float, copy=True) if out is None else out * col
        return out


def _fmt_number(x: float) -> str:
    return repr(float(x))


def parse_term(text: str | Term) -> Term:
    if isinstance(text, Term):
        return text
    s = "".join(str(text).split())
    if not s:
        raise DesignError("empty design term")
    if ">" in s:
        name, _, cut = s.partition(">")
        _check_name(name, s)
        try:
            value = float(cut)
        except ValueError:
            raise DesignError(f"bad threshold in term {text!r}") from None
        if not math.isfinite(value):
            raise DesignError(f"non-finite threshold in term {text!r}")
        return Term((name,), value)
    factors: list[str] = []
    for piece in s.split("*"):
        name, _, power = piece.partition("^")
        _check_name(name, s)
        k = 1
        if power:
            if not power.isdigit() or int(power) < 1:
                raise DesignError(f"bad power in term {text!r}")
            k = int(power)
        factors.extend([name] * k)
    return Term(tuple(sorted(factors, key=_factor_order)))


def _factor_order(name: str) -> tuple[int, str]:
    # treatment first so "W1*A" and "A*W1" are the same term
    return (0, "") if name == TREATMENT else (1, name)


def _check_name(name: str, text: str) -> None:
    if not _NAME.match(name):
        raise DesignError(f"bad factor name {name!r} in term {text!r}")


def parse_design(terms: Iterable[str | Term]) -> tuple[Term, ...]:
    out = tuple(parse_term(t) for t in terms)
    labels = [t.label for t in out]
    if len(set(labels)) != len(labels):
        raise DesignError(f"duplicate design terms in {labels}")
    return out


def referenced_covariates(terms: Iterable[Term]) -> set[str]:
    return {c for t in terms for c in t.covariates}


def check_resolvable(terms: Iterable[Term], columns: Sequence[str]) -> None:
    missing = sorted(referenced_covariates(terms) - set(columns))
    if missing:
        raise DesignError(f"unknown covariate(s): {', '.join(missing)}")


def design_matrix(terms: Sequence[Term], data, treatment_override: int | None = None,
                  intercept: bool = True) -> np.ndarray:
    """Materialize the design matrix (intercept first) for ``terms`` on ``data``."""
    check_resolvable(terms, data.columns)
    n = data.n
    a = data.a if treatment_override is None else np.full(n, float(treatment_override))
    lookup = {name: data.w[:, j] for j, name in enumerate(data.columns)}
    cols = [np.ones(n)] if intercept else []
    cols.extend(t.evaluate(lookup, a) for t in terms)
    if not cols:
        return np.empty((n, 0))
    return np.column_stack(cols)
