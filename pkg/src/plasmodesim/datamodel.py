"""Core data types, dataset validation and CSV serialization."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .design import TREATMENT, Term, design_matrix, parse_design

CONTINUOUS = "continuous"
BINARY = "binary"
OUTCOME_KINDS = (CONTINUOUS, BINARY)

IDENTITY = "identity"
LOGIT = "logit"
LINKS = (IDENTITY, LOGIT)

SAMPLE_TREATMENT = "sample_treatment"
GENERATE_TREATMENT = "generate_treatment"
FRAMEWORKS = (SAMPLE_TREATMENT, GENERATE_TREATMENT)


class CsvFormatError(ValueError):
    """A CSV file that cannot be ingested; the message names row and column."""


def _frozen_array(x, dtype=float, ndim=1) -> np.ndarray:
    arr = np.array(x, dtype=dtype)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """One observational sample ``(W, A, Y)``.

    Arrays are copied and marked read-only on construction. Invariants are
    not enforced here; use :func:`validate_dataset`.
    """

    w: np.ndarray
    columns: tuple[str, ...]
    a: np.ndarray
    y: np.ndarray
    outcome_kind: str = CONTINUOUS

    def __post_init__(self):
        object.__setattr__(self, "w", _frozen_array(self.w, ndim=2))
        object.__setattr__(self, "a", _frozen_array(self.a))
        object.__setattr__(self, "y", _frozen_array(self.y))
        object.__setattr__(self, "columns", tuple(self.columns))
        if self.outcome_kind not in OUTCOME_KINDS:
            raise ValueError(f"outcome_kind must be one of {OUTCOME_KINDS}")
        if TREATMENT in self.columns:
            raise ValueError(f"covariate name {TREATMENT!r} is reserved for treatment")

    @property
    def n(self) -> int:
        return len(self.a)

    def column(self, name: str) -> np.ndarray:
        return self.w[:, self.columns.index(name)]

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.w[idx], self.columns, self.a[idx], self.y[idx], self.outcome_kind)

    def replace(self, *, a=None, y=None, w=None, columns=None, outcome_kind=None) -> "Dataset":
        return Dataset(
            self.w if w is None else w,
            self.columns if columns is None else columns,
            self.a if a is None else a,
            self.y if y is None else y,
            self.outcome_kind if outcome_kind is None else outcome_kind,
        )

    def with_covariate(self, name: str, values: np.ndarray) -> "Dataset":
        return self.replace(w=np.column_stack([self.w, values]), columns=self.columns + (name,))


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients of a linear predictor plus link.

    ``terms`` is an ordered tuple of ``(Term, coefficient)`` pairs; the
    intercept is kept separately. ``noise_sd`` is the residual standard
    deviation used when an identity-link model generates outcomes.
    """

    intercept: float
    terms: tuple[tuple[Term, float], ...] = ()
    link: str = IDENTITY
    noise_sd: float | None = None

    def __post_init__(self):
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}, got {self.link!r}")
        if self.noise_sd is not None and self.link != IDENTITY:
            raise ValueError("noise_sd only applies to the identity link")
        if self.noise_sd is not None and not (self.noise_sd >= 0 and math.isfinite(self.noise_sd)):
            raise ValueError("noise_sd must be finite and non-negative")
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "terms", tuple((t, float(c)) for t, c in self.terms))

    @classmethod
    def from_mapping(cls, intercept: float, coefs: dict | Iterable = (), link: str = IDENTITY,
                     noise_sd: float | None = None) -> "ModelSpec":
        """Build from ``{"W1": 0.96, "A*W1": 0.2, ...}`` (order preserved)."""
        items = list(coefs.items()) if isinstance(coefs, dict) else list(coefs)
        design = parse_design(k for k, _ in items)
        return cls(intercept, tuple(zip(design, (v for _, v in items))), link, noise_sd)

    @property
    def design(self) -> tuple[Term, ...]:
        return tuple(t for t, _ in self.terms)

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.intercept] + [c for _, c in self.terms])

    def coefficient(self, label: str) -> float:
        for t, c in self.terms:
            if t.label == label:
                return c
        raise KeyError(label)

    def with_coefficients(self, beta: Sequence[float]) -> "ModelSpec":
        beta = list(beta)
        if len(beta) != len(self.terms) + 1:
            raise ValueError("coefficient count must equal design-term count + 1")
        return ModelSpec(beta[0], tuple(zip(self.design, beta[1:])), self.link, self.noise_sd)

    def linear_predictor(self, data: Dataset, treatment_override: int | None = None) -> np.ndarray:
        X = design_matrix(self.design, data, treatment_override)
        return X @ self.coefficients

    def mean(self, data: Dataset, treatment_override: int | None = None) -> np.ndarray:
        eta = self.linear_predictor(data, treatment_override)
        return expit(eta) if self.link == LOGIT else eta

    def treatment_contrast(self, data: Dataset) -> np.ndarray:
        """Per-row ``eta(1, W) - eta(0, W)`` from treatment-containing terms only."""
        terms = [(t, c) for t, c in self.terms if t.has_treatment]
        if not terms:
            return np.zeros(data.n)
        design = tuple(t for t, _ in terms)
        coefs = np.array([c for _, c in terms])
        X1 = design_matrix(design, data, 1, intercept=False)
        X0 = design_matrix(design, data, 0, intercept=False)
        return X1 @ coefs - X0 @ coefs


@dataclass(frozen=True)
class TruthSet:
    ey1: float
    ey0: float
    ate: float
    rr: float | None = None
    logcor: float | None = None

    def get(self, estimand: str) -> float | None:
        return getattr(self, estimand)


@dataclass(frozen=True, eq=False)
class SourceDataset:
    data: Dataset
    scenario_id: str
    seed: int
    truths: TruthSet


@dataclass(frozen=True)
class EstimateRecord:
    estimator_id: str
    ey1: float
    ey0: float
    ate: float
    rr: float | None = None
    logcor: float | None = None
    converged: bool = True
    replicate_index: int = 0
    framework: str = ""

    def get(self, estimand: str) -> float | None:
        return getattr(self, estimand)


def validate_dataset(d: Dataset) -> list[str]:
    """Return every invariant violation in ``d``; an empty list means ok."""
    problems: list[str] = []
    n_w, n_a, n_y = d.w.shape[0], len(d.a), len(d.y)
    if not (n_w == n_a == n_y):
        problems.append(f"length mismatch: w has {n_w} rows, a has {n_a}, y has {n_y}")
    if n_a < 1:
        problems.append("dataset has no rows")
    if d.w.ndim != 2 or (d.w.size and d.w.shape[1] != len(d.columns)):
        problems.append(f"w has {d.w.shape[1] if d.w.ndim == 2 else '?'} columns "
                        f"but {len(d.columns)} names")
    for row in np.flatnonzero(~np.isfinite(d.a)):
        problems.append(f"non-finite treatment at row {row}")
    for row in np.flatnonzero(np.isfinite(d.a) & (d.a != 0) & (d.a != 1)):
        problems.append(f"non-binary treatment at row {row}")
    for row in np.flatnonzero(~np.isfinite(d.y)):
        problems.append(f"non-finite outcome at row {row}")
    if d.outcome_kind == BINARY:
        for row in np.flatnonzero(np.isfinite(d.y) & (d.y != 0) & (d.y != 1)):
            problems.append(f"non-binary outcome at row {row}")
    if d.w.size:
        bad = np.argwhere(~np.isfinite(d.w))
        for row, col in bad:
            name = d.columns[col] if col < len(d.columns) else str(col)
            problems.append(f"non-finite covariate {name} at row {row}")
    return problems


# --- CSV -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _read_rows(path: str | Path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    return header, body


def _parse_cell(text: str, row: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise CsvFormatError(f"non-numeric cell {text!r} at row {row}, column {col!r}") from None
    if not math.isfinite(value):
        raise CsvFormatError(f"non-finite cell {text!r} at row {row}, column {col!r}")
    return value


def load_covariates_csv(path: str | Path, schema: Sequence[str] | None = None
                        ) -> tuple[np.ndarray, tuple[str, ...]]:
    """Read a numeric covariate file into an ``(n, p)`` matrix and column names.

    Rows are numbered from 1 (first data row) in error messages. Categorical
    expansion is not performed.
    """
    header, body = _read_rows(path)
    if len(set(header)) != len(header):
        raise CsvFormatError(f"{path}: duplicate column names in header")
    if schema is not None:
        missing = [c for c in schema if c not in header]
        extra = [c for c in header if c not in schema]
        if missing or extra:
            raise CsvFormatError(f"{path}: schema mismatch (missing {missing}, extra {extra})")
    out = np.empty((len(body), len(header)))
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise CsvFormatError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
        for j, cell in enumerate(row):
            out[i - 1, j] = _parse_cell(cell.strip(), i, header[j])
    if schema is not None:
        order = [header.index(c) for c in schema]
        return out[:, order], tuple(schema)
    return out, tuple(header)


def write_covariates_csv(path: str | Path, matrix: np.ndarray, columns: Sequence[str]) -> None:
    matrix = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(matrix)):
        raise ValueError("refusing to write non-finite values")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in matrix:
            writer.writerow([_fmt(x) for x in row])


def write_dataset_csv(path: str | Path, d: Dataset) -> None:
    """Covariates followed by ``A`` and ``Y`` columns."""
    write_covariates_csv(path, np.column_stack([d.w, d.a, d.y]), d.columns + ("A", "Y"))


def load_dataset_csv(path: str | Path, outcome_kind: str | None = None) -> Dataset:
    matrix, names = load_covariates_csv(path)
    for required in ("A", "Y"):
        if required not in names:
            raise CsvFormatError(f"{path}: dataset file needs an {required!r} column")
    ia, iy = names.index("A"), names.index("Y")
    keep = [j for j in range(len(names)) if j not in (ia, iy)]
    y = matrix[:, iy]
    if outcome_kind is None:
        outcome_kind = BINARY if np.all((y == 0) | (y == 1)) else CONTINUOUS
    d = Dataset(matrix[:, keep], tuple(names[j] for j in keep), matrix[:, ia], y, outcome_kind)
    problems = validate_dataset(d)
    if problems:
        raise CsvFormatError(f"{path}: " + "; ".join(problems[:5]))
    return d


RECORD_COLUMNS = ("replicate", "estimator", "framework", "ey1", "ey0", "ate", "rr", "logcor",
                  "converged")


def _opt(x: float | None) -> str:
    return "" if x is None or not math.isfinite(x) else _fmt(x)


def write_records_csv(path: str | Path, records: Iterable[EstimateRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow([r.replicate_index, r.estimator_id, r.framework, _opt(r.ey1),
                             _opt(r.ey0), _opt(r.ate), _opt(r.rr), _opt(r.logcor),
                             "true" if r.converged else "false"])


def read_records_csv(path: str | Path) -> list[EstimateRecord]:
    header, body = _read_rows(path)
    if tuple(header) != RECORD_COLUMNS:
        raise CsvFormatError(f"{path}: expected columns {','.join(RECORD_COLUMNS)}")
    out = []
    for i, row in enumerate(body, start=1):
        if len(row) != len(RECORD_COLUMNS):
            raise CsvFormatError(f"{path}: row {i} has {len(row)} cells")
        cells = dict(zip(RECORD_COLUMNS, row))

        def num(key, required):
            text = cells[key].strip()
            if not text:
                return math.nan if required else None
            try:
                return float(text)
            except ValueError:
                raise CsvFormatError(f"non-numeric cell {text!r} at row {i}, column {key!r}") from None

        conv = cells["converged"].strip().lower()
        if conv not in ("true", "false"):
            raise CsvFormatError(f"bad converged flag {conv!r} at row {i}")
        out.append(EstimateRecord(
            estimator_id=cells["estimator"], ey1=num("ey1", True), ey0=num("ey0", True),
            ate=num("ate", True), rr=num("rr", False), logcor=num("logcor", False),
            converged=conv == "true", replicate_index=int(cells["replicate"]),
            framework=cells["framework"]))
    return out


def write_truths_csv(path: str | Path, truths: TruthSet) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["estimand", "value"])
        for key in ("ey1", "ey0", "ate", "rr", "logcor"):
            writer.writerow([key, _opt(getattr(truths, key))])


def read_truths_csv(path: str | Path) -> TruthSet:
    header, body = _read_rows(path)
    if header != ["estimand", "value"]:
        raise CsvFormatError(f"{path}: expected columns estimand,value")
    values = {}
    for i, (key, text) in enumerate(body, start=1):
        values[key.strip()] = _parse_cell(text, i, "value") if text.strip() else None
    return TruthSet(**{k: values.get(k) for k in ("ey1", "ey0", "ate", "rr", "logcor")})
