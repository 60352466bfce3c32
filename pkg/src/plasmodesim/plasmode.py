"""The two plasmode resampling frameworks.

Sample Treatment resamples ``(W, A)`` pairs and generates ``Y``. Generate
Treatment resamples ``W`` alone, generates ``A`` from a propensity model and
then ``Y``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import (GENERATE_TREATMENT, LOGIT, SAMPLE_TREATMENT, Dataset, ModelSpec,
                        SourceDataset)
from .dgm import ScenarioSpec, simulate_outcome, simulate_treatment
from .glm import RankDeficientError, fit_linear_weighted, fit_logistic_weighted

TRUE_MODEL = "true_model"
FITTED_ON_SOURCE = "fitted_on_source"
MODEL_SOURCES = (TRUE_MODEL, FITTED_ON_SOURCE)


@dataclass(frozen=True)
class PlasmodeConfig:
    framework: str = GENERATE_TREATMENT
    ps_for_generation: str = FITTED_ON_SOURCE
    outcome_for_generation: str = TRUE_MODEL
    replicate_size: int | None = None

    def __post_init__(self):
        if self.framework not in (SAMPLE_TREATMENT, GENERATE_TREATMENT):
            raise ValueError(f"unknown framework {self.framework!r}")
        for name in ("ps_for_generation", "outcome_for_generation"):
            if getattr(self, name) not in MODEL_SOURCES:
                raise ValueError(f"{name} must be one of {MODEL_SOURCES}")
        if self.replicate_size is not None and self.replicate_size < 1:
            raise ValueError("replicate_size must be at least 1")


def _size(source: SourceDataset, size: int | None) -> int:
    n = source.data.n if size is None else int(size)
    if n < 1:
        raise ValueError("replicate_size must be at least 1")
    return n


def draw_sample_treatment(source: SourceDataset, outcome_model: ModelSpec, rng: np.random.Generator,
                          replicate_size: int | None = None, return_index: bool = False):
    """Resample ``(W, A)`` rows with replacement, then draw ``Y`` from ``outcome_model``."""
    idx = rng.integers(0, source.data.n, size=_size(source, replicate_size))
    d = source.data.take(idx)
    d = d.replace(y=simulate_outcome(outcome_model, d, rng))
    return (d, idx) if return_index else d


def draw_generate_treatment(source: SourceDataset, ps_model: ModelSpec, outcome_model: ModelSpec,
                            rng: np.random.Generator, replicate_size: int | None = None,
                            return_index: bool = False):
    """Resample ``W`` rows, draw ``A ~ Bernoulli(ps)``, then ``Y`` from ``outcome_model``."""
    if ps_model.link != LOGIT:
        raise ValueError("the generating propensity model must use the logit link")
    idx = rng.integers(0, source.data.n, size=_size(source, replicate_size))
    d = source.data.take(idx)
    d = d.replace(a=simulate_treatment(ps_model, d, rng))
    d = d.replace(y=simulate_outcome(outcome_model, d, rng))
    return (d, idx) if return_index else d


@dataclass(frozen=True)
class GenerationModels:
    """Resolved models used to draw replicates from one source."""

    ps_model: ModelSpec
    outcome_model: ModelSpec


def resolve_generation_models(spec: ScenarioSpec, source: SourceDataset,
                              config: PlasmodeConfig) -> GenerationModels:
    """Pick the true or source-fitted PS and outcome models for replicate generation.

    A source-fitted PS uses the scenario's PS design (intercept-only for
    randomized scenarios). A source-fitted outcome model keeps the true noise
    level for identity links.
    """
    ps = spec.ps_model
    if config.framework == GENERATE_TREATMENT and config.ps_for_generation == FITTED_ON_SOURCE:
        try:
            fit = fit_logistic_weighted(source.data, spec.ps_model.design, outcome=source.data.a)
        except RankDeficientError as exc:
            raise RuntimeError(f"propensity fit on the source failed: {exc}") from exc
        if not fit.converged:
            raise RuntimeError(f"propensity fit on the source failed: {fit.diagnostic}")
        ps = fit.spec
    outcome = spec.outcome_model
    if config.outcome_for_generation == FITTED_ON_SOURCE:
        design = spec.outcome_model.design
        try:
            if spec.outcome_model.link == LOGIT:
                fit = fit_logistic_weighted(source.data, design)
            else:
                fit = fit_linear_weighted(source.data, design)
        except RankDeficientError as exc:
            raise RuntimeError(f"outcome fit on the source failed: {exc}") from exc
        if not fit.converged:
            raise RuntimeError(f"outcome fit on the source failed: {fit.diagnostic}")
        outcome = ModelSpec(fit.spec.intercept, fit.spec.terms, spec.outcome_model.link,
                            spec.outcome_model.noise_sd)
    return GenerationModels(ps, outcome)


def draw_replicate(source: SourceDataset, models: GenerationModels, config: PlasmodeConfig,
                   rng: np.random.Generator) -> Dataset:
    if config.framework == SAMPLE_TREATMENT:
        return draw_sample_treatment(source, models.outcome_model, rng, config.replicate_size)
    return draw_generate_treatment(source, models.ps_model, models.outcome_model, rng,
                                   config.replicate_size)
