"""Data-generating mechanisms: built-in scenarios, source datasets and truths."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np
from scipy.special import logit

from .datamodel import (BINARY, CONTINUOUS, IDENTITY, LOGIT, Dataset, ModelSpec, SourceDataset,
                        TruthSet)
from .design import TREATMENT, DesignError, Term, check_resolvable, parse_design
from .glm import FittedGLM, fit_logistic_weighted


# --- covariate generators -----------------------------------------------

@dataclass(frozen=True)
class Normal:
    name: str
    mean: float = 0.0
    sd: float = 1.0

    def draw(self, rng, n, cols):
        return {self.name: self.mean + self.sd * rng.standard_normal(n)}


@dataclass(frozen=True)
class Bernoulli:
    name: str
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"{self.name}: Bernoulli p must lie in [0, 1]")

    def draw(self, rng, n, cols):
        return {self.name: (rng.random(n) < self.p).astype(float)}


@dataclass(frozen=True)
class SumWithNoise:
    """``base + N(0, sd)``."""

    name: str
    base: str
    sd: float = 1.0

    def draw(self, rng, n, cols):
        return {self.name: cols[self.base] + self.sd * rng.standard_normal(n)}


@dataclass(frozen=True)
class ThresholdIndicator:
    """``1{base > cutoff}``."""

    name: str
    base: str
    cutoff: float

    def draw(self, rng, n, cols):
        return {self.name: (cols[self.base] > self.cutoff).astype(float)}


@dataclass(frozen=True, eq=False)
class BootstrapCovariates:
    """Resample whole rows (with replacement) from a fixed covariate matrix."""

    matrix: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[1] != len(self.names):
            raise ValueError("covariate matrix must be (rows, len(names))")
        if m.shape[0] < 1:
            raise ValueError("covariate matrix has no rows")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "names", tuple(self.names))

    def draw(self, rng, n, cols):
        idx = rng.integers(0, self.matrix.shape[0], size=n)
        rows = self.matrix[idx]
        return {name: rows[:, j] for j, name in enumerate(self.names)}


CovariateGenerator = Union[Normal, Bernoulli, SumWithNoise, ThresholdIndicator, BootstrapCovariates]


def _generated_names(gen) -> tuple[str, ...]:
    return gen.names if isinstance(gen, BootstrapCovariates) else (gen.name,)


# --- scenarios ----------------------------------------------------------

@dataclass(frozen=True)
class WorkingModels:
    """Estimator-side designs for the propensity score, the outcome and the MSM."""

    ps_design: tuple[Term, ...]
    outcome_design: tuple[Term, ...]
    msm_design: tuple[Term, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "ps_design", parse_design(self.ps_design))
        object.__setattr__(self, "outcome_design", parse_design(self.outcome_design))
        if self.msm_design is not None:
            object.__setattr__(self, "msm_design", parse_design(self.msm_design))


def randomized(p: float) -> ModelSpec:
    """Treatment assigned independently of W with probability ``p``."""
    if not 0.0 < p < 1.0:
        raise ValueError("randomized(p) requires 0 < p < 1")
    return ModelSpec(float(logit(p)), (), LOGIT)


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    scenario_id: str
    covariates: tuple
    ps_model: ModelSpec
    outcome_model: ModelSpec
    msm_design: tuple[Term, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.msm_design is not None:
            object.__setattr__(self, "msm_design", parse_design(self.msm_design))
        if self.ps_model.link != LOGIT:
            raise ValueError("the propensity model must use the logit link")
        if any(t.has_treatment for t in self.ps_model.design):
            raise DesignError("the propensity model cannot depend on treatment")
        if self.outcome_model.link == IDENTITY and self.outcome_model.noise_sd is None:
            raise ValueError("identity-link outcome models need noise_sd")
        names: list[str] = []
        for gen in self.covariates:
            for base in (getattr(gen, "base", None),):
                if base is not None and base not in names:
                    raise DesignError(f"{gen.name}: base covariate {base!r} must be generated first")
            names.extend(_generated_names(gen))
        if len(set(names)) != len(names):
            raise DesignError("duplicate covariate names")
        if TREATMENT in names:
            raise DesignError(f"covariate name {TREATMENT!r} is reserved")
        check_resolvable(self.ps_model.design, names)
        check_resolvable(self.outcome_model.design, names)
        if self.msm_design is not None:
            check_resolvable(self.msm_design, names)
            if not any(t.label == TREATMENT for t in self.msm_design):
                raise DesignError("the MSM design must contain the treatment term 'A'")
            if self.outcome_model.link != LOGIT:
                raise ValueError("MSM scenarios need a binary (logit) outcome model")

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(n for g in self.covariates for n in _generated_names(g))

    @property
    def outcome_kind(self) -> str:
        return BINARY if self.outcome_model.link == LOGIT else CONTINUOUS

    @property
    def is_randomized(self) -> bool:
        return not self.ps_model.terms

    def working_models(self) -> WorkingModels:
        """Correctly specified working models, as used throughout the numerical studies."""
        return WorkingModels(self.ps_model.design, self.outcome_model.design, self.msm_design)


def _covariates_s123():
    return (Normal("W1", 0.0, 1.0), Normal("W2", 0.5, 1.0), Bernoulli("W3", 0.4))


def _covariates_s4():
    return _covariates_s123() + (SumWithNoise("W4", "W3", 1.0), ThresholdIndicator("W5", "W1", 0.2))


def _builtin_scenarios() -> dict[str, ScenarioSpec]:
    ps12 = ModelSpec.from_mapping(-0.48, {"W1": 0.96, "W2": 0.012, "W3": 1.08}, LOGIT)
    y1 = ModelSpec.from_mapping(10.0, {"A": 2.0, "W1": 1.0, "W2": 0.7, "W3": 0.02}, IDENTITY, 1.0)
    y2 = ModelSpec.from_mapping(-1.8, {"A": 1.1, "W1": 0.24, "W2": 0.08, "W3": 0.8}, LOGIT)
    ps3 = ModelSpec.from_mapping(-0.72, {"W1": -0.72, "W2": 0.18, "W3": 0.81}, LOGIT)
    y3 = ModelSpec.from_mapping(-4.9, {"A": -2.0, "W1": 0.4, "W2": -4.0, "W3": -3.0}, LOGIT)
    ps4 = ModelSpec.from_mapping(-0.4, {"W1": 0.8, "W2": 0.01, "W3": 0.9}, LOGIT)
    y4 = ModelSpec.from_mapping(-2.5, {"A": 1.1, "W1": 0.24, "W2": 0.08, "W3": 0.8,
                                       "W4": -0.3, "W5": -0.6}, LOGIT)
    return {
        "S1": ScenarioSpec("S1", _covariates_s123(), ps12, y1),
        "S1a": ScenarioSpec("S1a", _covariates_s123(), randomized(0.5), y1),
        "S2": ScenarioSpec("S2", _covariates_s123(), ps12, y2),
        "S2a": ScenarioSpec("S2a", _covariates_s123(), randomized(0.5), y2),
        "S3": ScenarioSpec("S3", _covariates_s123(), ps3, y3),
        "S4a": ScenarioSpec("S4a", _covariates_s4(), ps4, y4,
                            msm_design=("A", "W1", "W2", "W3", "W4", "W5")),
        "S4b": ScenarioSpec("S4b", _covariates_s4(), ps4, y4, msm_design=("A", "W1", "W2", "W3")),
    }


BUILTIN_SCENARIOS = _builtin_scenarios()


def get_scenario(scenario_id: str) -> ScenarioSpec:
    try:
        return BUILTIN_SCENARIOS[scenario_id]
    except KeyError:
        raise KeyError(f"unknown scenario {scenario_id!r}; built-ins: "
                       f"{', '.join(BUILTIN_SCENARIOS)}") from None


# --- generation ---------------------------------------------------------

def draw_covariates(spec: ScenarioSpec, n: int, rng: np.random.Generator) -> Dataset:
    cols: dict[str, np.ndarray] = {}
    for gen in spec.covariates:
        cols.update(gen.draw(rng, n, cols))
    names = spec.covariate_names
    w = np.column_stack([cols[c] for c in names]) if names else np.empty((n, 0))
    return Dataset(w, names, np.zeros(n), np.zeros(n), spec.outcome_kind)


def simulate_treatment(ps_model: ModelSpec, data: Dataset, rng: np.random.Generator) -> np.ndarray:
    p = ps_model.mean(data)
    return (rng.random(data.n) < p).astype(float)


def simulate_outcome(outcome_model: ModelSpec, data: Dataset, rng: np.random.Generator) -> np.ndarray:
    """``Y ~ Bernoulli(mean)`` for the logit link, ``N(mean, noise_sd)`` for identity."""
    mu = outcome_model.mean(data)
    if outcome_model.link == LOGIT:
        return (rng.random(data.n) < mu).astype(float)
    sd = outcome_model.noise_sd or 0.0
    if sd == 0.0:
        return mu
    return mu + sd * rng.standard_normal(data.n)


def draw_observed(spec: ScenarioSpec, n: int, rng: np.random.Generator) -> Dataset:
    """Draw ``W``, then ``A`` from the PS model, then ``Y`` from the outcome model."""
    if n < 1:
        raise ValueError("n must be at least 1")
    data = draw_covariates(spec, n, rng)
    data = data.replace(a=simulate_treatment(spec.ps_model, data, rng))
    return data.replace(y=simulate_outcome(spec.outcome_model, data, rng))


def compute_truths(data: Dataset, outcome_model: ModelSpec) -> TruthSet:
    """Plug-in truths: averages of the true conditional means over the rows of ``data``."""
    q1 = outcome_model.mean(data, 1)
    q0 = outcome_model.mean(data, 0)
    ey1 = math.fsum(q1) / data.n
    ey0 = math.fsum(q0) / data.n
    if outcome_model.link == IDENTITY:
        # exact in the treatment coefficients: intercept and W-only terms cancel row by row
        ate = math.fsum(outcome_model.treatment_contrast(data)) / data.n
        return TruthSet(ey1, ey0, ate)
    rr = ey1 / ey0 if ey0 != 0 else None
    return TruthSet(ey1, ey0, ey1 - ey0, rr)


def stacked_msm_fit(data: Dataset, outcome_model: ModelSpec, msm_design: Sequence[Term | str]
                    ) -> FittedGLM:
    """Project the true outcome model onto the MSM over the covariates in ``data``.

    Stacks ``n`` rows at ``A=0`` with outcome ``Q(0, W)`` on ``n`` rows at
    ``A=1`` with outcome ``Q(1, W)`` and fits an unweighted logistic MSM to
    the fractional outcomes.
    """
    n = data.n
    q0 = outcome_model.mean(data, 0)
    q1 = outcome_model.mean(data, 1)
    stacked = Dataset(np.vstack([data.w, data.w]), data.columns,
                      np.concatenate([np.zeros(n), np.ones(n)]),
                      np.concatenate([q0, q1]), CONTINUOUS)
    return fit_logistic_weighted(stacked, msm_design)


def _treatment_index(design: Sequence[Term]) -> int:
    for j, t in enumerate(design):
        if t.label == TREATMENT:
            return j + 1
    raise DesignError("design has no treatment term")


def source_truths(spec: ScenarioSpec, data: Dataset) -> TruthSet:
    truths = compute_truths(data, spec.outcome_model)
    if spec.msm_design is not None:
        fit = stacked_msm_fit(data, spec.outcome_model, spec.msm_design)
        if fit.converged:
            truths = replace(truths, logcor=float(fit.coefficients[_treatment_index(spec.msm_design)]))
    return truths


def generate_source(spec: ScenarioSpec, n: int, seed: int) -> SourceDataset:
    """Draw one source dataset; deterministic given ``(spec, n, seed)``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    data = draw_observed(spec, n, rng)
    return SourceDataset(data, spec.scenario_id, int(seed), source_truths(spec, data))


def source_from_dataset(spec: ScenarioSpec, data: Dataset, seed: int = 0) -> SourceDataset:
    """Wrap an externally supplied dataset as a source, computing its truths."""
    check_resolvable(spec.outcome_model.design, data.columns)
    return SourceDataset(data, spec.scenario_id, int(seed), source_truths(spec, data))


@dataclass(frozen=True)
class MsmTruth:
    design: tuple[Term, ...]
    coefficients: np.ndarray
    mc_se: np.ndarray
    n_reps: int
    n_failed: int

    @property
    def logcor(self) -> float:
        return float(self.coefficients[_treatment_index(self.design)])

    def as_dict(self) -> dict[str, float]:
        labels = ("(Intercept)",) + tuple(t.label for t in self.design)
        return dict(zip(labels, map(float, self.coefficients)))


def compute_msm_truth(spec: ScenarioSpec, n_big: int = 100_000, reps: int = 100,
                      seed: int = 0) -> MsmTruth:
    """Population MSM coefficients by repeated stacked regression.

    Each repetition draws a fresh dataset of ``n_big`` rows from the DGM,
    projects the true outcome model onto the MSM and records the coefficients.
    Returns their mean and Monte Carlo standard error. Non-converged
    repetitions are dropped; more than 1% of them is an error.
    """
    if spec.msm_design is None:
        raise ValueError(f"scenario {spec.scenario_id} has no MSM design")
    coefs = []
    failed = 0
    ss = np.random.SeedSequence(seed)
    for child in ss.spawn(reps):
        data = draw_observed(spec, n_big, np.random.Generator(np.random.PCG64(child)))
        fit = stacked_msm_fit(data, spec.outcome_model, spec.msm_design)
        if fit.converged:
            coefs.append(fit.coefficients)
        else:
            failed += 1
    if failed > 0.01 * reps:
        raise RuntimeError(f"{failed} of {reps} stacked MSM fits failed to converge")
    arr = np.array(coefs)
    se = arr.std(axis=0, ddof=1) / math.sqrt(len(arr)) if len(arr) > 1 else np.full(arr.shape[1], np.nan)
    return MsmTruth(spec.msm_design, arr.mean(axis=0), se, reps, failed)


def build_custom_spec(covariate_source: np.ndarray, columns: Sequence[str], ps_coeffs: ModelSpec,
                      outcome_coeffs: ModelSpec, scenario_id: str = "custom",
                      msm_design: Sequence[str] | None = None) -> ScenarioSpec:
    """Coefficient-driven scenario whose covariates are bootstrapped from a fixed matrix.

    This is the resample-W, generate-A, generate-Y pipeline for user-supplied
    covariate files. Unresolvable term names raise :class:`DesignError`.
    """
    columns = tuple(columns)
    check_resolvable(ps_coeffs.design, columns)
    check_resolvable(outcome_coeffs.design, columns)
    return ScenarioSpec(scenario_id, (BootstrapCovariates(covariate_source, columns),),
                        ps_coeffs, outcome_coeffs, msm_design)
