"""Closed-form plasmode targets and the Sample Treatment bias term ``B_n``.

Conditional on a source dataset with fitted propensity ``g_n`` and true
outcome means ``Q(a, W)``:

* ``psi_n = n^-1 sum Q(1, W_i)`` is the plasmode truth;
* resampling ``(W, A)`` pairs pins the Horvitz-Thompson IPTW mean at
  ``n^-1 sum A_i Q(1, W_i) / g_n(W_i)``, which differs from ``psi_n`` by
  ``B_n = n^-1 sum (A_i - g_n(W_i)) Q(1, W_i) / g_n(W_i)``;
* generating ``A`` from ``g_n`` instead replaces ``A_i`` by its expectation and
  the target collapses to ``psi_n``.

Comparator-arm versions swap ``A`` for ``1 - A`` and ``g`` for ``1 - g``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datamodel import ModelSpec, SourceDataset
from .dgm import ScenarioSpec
from .estimators import weight_cap
from .glm import FittedGLM, RankDeficientError, fit_logistic_weighted

IDENTITY_TOL = 1e-14
GENERATE_IDENTITY_TOL = 1e-12


class OracleError(ValueError):
    """The propensity fit is degenerate (zero probability at an observed arm)."""


@dataclass(frozen=True)
class BiasReport:
    arm: str
    n: int
    psi_n: float
    iptw_target: float
    b_n: float
    scaled: float
    hajek_target: float

    @property
    def predicted_sample_mean(self) -> float:
        return self.psi_n + self.b_n

    @property
    def identity_residual(self) -> float:
        return self.b_n - (self.iptw_target - self.psi_n)

    def as_dict(self) -> dict[str, float]:
        return {"psi_n": self.psi_n, "iptw_target": self.iptw_target, "b_n": self.b_n,
                "sqrt_n_b_n": self.scaled, "predicted_sample_mean": self.predicted_sample_mean,
                "hajek_target": self.hajek_target, "identity_residual": self.identity_residual}


def _arrays(source: SourceDataset, gbar_n, qbar, arm: int):
    """Return (indicator of arm, probability of arm, Q(arm, W)) as arrays."""
    d = source.data
    g = gbar_n.spec.mean(d) if isinstance(gbar_n, FittedGLM) else np.asarray(gbar_n, dtype=float)
    q = qbar.mean(d, arm) if isinstance(qbar, ModelSpec) else np.asarray(qbar, dtype=float)
    if g.shape != (d.n,) or q.shape != (d.n,):
        raise ValueError("g and Q must have one value per source row")
    if arm == 1:
        ind, prob = d.a, g
    elif arm == 0:
        ind, prob = 1.0 - d.a, 1.0 - g
    else:
        raise ValueError("arm must be 0 or 1")
    bad = np.flatnonzero((ind == 1) & (prob <= 0))
    if bad.size:
        raise OracleError(f"fitted probability of arm {arm} is 0 at row {bad[0]} where it is observed")
    return ind, prob, q


def _mean(x) -> float:
    x = np.asarray(x, dtype=float)
    return math.fsum(x) / len(x)


def iptw_sample_treatment_target(source: SourceDataset, gbar_n, qbar1, arm: int = 1) -> float:
    """``n^-1 sum A_i Q(1, W_i) / g_n(W_i)`` (or the comparator analogue)."""
    ind, prob, q = _arrays(source, gbar_n, qbar1, arm)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _mean(np.where(ind == 1, q / prob, 0.0))


def hajek_target(source: SourceDataset, gbar_n, qbar1, arm: int = 1, cap: bool = True) -> float:
    """Weight-normalized analogue ``sum w A Q / sum w A`` with the estimator's stabilized weights.

    This is the limit of the weighted-regression IPTW arm mean under Sample
    Treatment, where each arm's weights are renormalized to sum to one.
    """
    ind, prob, q = _arrays(source, gbar_n, qbar1, arm)
    n = source.data.n
    p_arm = float(ind.mean())
    with np.errstate(divide="ignore"):
        w = np.where(ind == 1, p_arm / prob, 0.0)
    if cap:
        w = np.minimum(w, weight_cap(n))
    return math.fsum(w * q) / math.fsum(w)


def bias_bn(source: SourceDataset, gbar_n, qbar1, arm: int = 1) -> BiasReport:
    ind, prob, q = _arrays(source, gbar_n, qbar1, arm)
    n = source.data.n
    psi = _mean(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ind == 1, q / prob, 0.0)
    target = _mean(ratio)
    # (A - g) Q / g summed as A Q / g minus Q; fsum keeps it exactly rounded
    b_n = math.fsum(np.concatenate([ratio, -q])) / n
    if abs(b_n - (target - psi)) > IDENTITY_TOL * max(1.0, abs(psi)):
        raise AssertionError("B_n identity violated")
    return BiasReport(str(arm), n, psi, target, b_n, math.sqrt(n) * b_n,
                      hajek_target(source, gbar_n, qbar1, arm))


def generate_treatment_target_identity(source: SourceDataset, gbar_n, qbar1, arm: int = 1
                                       ) -> float:
    """``n^-1 sum g_n Q / g_n``; equals ``psi_n`` for any positive ``g_n``."""
    _, prob, q = _arrays(source, gbar_n, qbar1, arm)
    if np.any(prob <= 0):
        raise OracleError("generating probabilities must be strictly positive")
    value = _mean(prob * q / prob)
    psi = _mean(q)
    if abs(value - psi) > GENERATE_IDENTITY_TOL * max(1.0, abs(psi)):
        raise AssertionError("generate-treatment identity violated")
    return value


def ate_report(arm1: BiasReport, arm0: BiasReport) -> BiasReport:
    """Difference of the arm reports; ``B_n`` for the ATE is ``B_n(1) - B_n(0)``."""
    b = arm1.b_n - arm0.b_n
    return BiasReport("ate", arm1.n, arm1.psi_n - arm0.psi_n,
                      arm1.iptw_target - arm0.iptw_target, b, math.sqrt(arm1.n) * b,
                      arm1.hajek_target - arm0.hajek_target)


@dataclass(frozen=True)
class OracleResult:
    arm1: BiasReport
    arm0: BiasReport
    ate: BiasReport
    gbar_n: FittedGLM

    def reports(self) -> tuple[BiasReport, BiasReport, BiasReport]:
        return self.arm1, self.arm0, self.ate


def source_oracle(spec: ScenarioSpec, source: SourceDataset) -> OracleResult:
    """Fit ``g_n`` on the source with the scenario's PS design and build all reports."""
    try:
        fit = fit_logistic_weighted(source.data, spec.ps_model.design, outcome=source.data.a)
    except RankDeficientError as exc:
        raise OracleError(f"propensity fit on the source failed: {exc}") from exc
    if not fit.converged:
        raise OracleError(f"propensity fit on the source failed: {fit.diagnostic}")
    r1 = bias_bn(source, fit, spec.outcome_model, 1)
    r0 = bias_bn(source, fit, spec.outcome_model, 0)
    return OracleResult(r1, r0, ate_report(r1, r0), fit)
