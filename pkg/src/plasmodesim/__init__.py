"""Plasmode simulation of causal estimators under two resampling frameworks."""

__version__ = "0.1.0"

from .datamodel import (GENERATE_TREATMENT, SAMPLE_TREATMENT, Dataset, EstimateRecord, ModelSpec,
                        SourceDataset, TruthSet)
from .dgm import BUILTIN_SCENARIOS, ScenarioSpec, WorkingModels, generate_source, get_scenario
from .estimators import STANDARD_ESTIMATORS, estimate_all
from .harness import MetricsSummary, multi_source_study, run_monte_carlo, summarize
from .oracle import bias_bn, source_oracle

__all__ = [
    "GENERATE_TREATMENT", "SAMPLE_TREATMENT", "Dataset", "EstimateRecord", "ModelSpec",
    "SourceDataset", "TruthSet", "BUILTIN_SCENARIOS", "ScenarioSpec", "WorkingModels",
    "generate_source", "get_scenario", "STANDARD_ESTIMATORS", "estimate_all", "MetricsSummary",
    "multi_source_study", "run_monte_carlo", "summarize", "bias_bn", "source_oracle",
]
