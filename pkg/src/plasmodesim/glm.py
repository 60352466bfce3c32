"""Weighted linear and logistic regression fitted from scratch.

Linear fits solve weighted least squares through a pivoted QR factorization.
Logistic fits use Newton-Raphson (IRLS) with step-halving on the weighted
deviance. Fractional outcomes in [0, 1] are accepted by the logistic fitter
(quasi-likelihood), which the stacked-regression truth computation needs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from .datamodel import IDENTITY, LOGIT, Dataset, ModelSpec
from .design import Term, design_matrix, parse_design

SCORE_TOL = 1e-8
STEP_TOL = 1e-10
MAX_ITER = 100
PIVOT_TOL = 1e-10
ETA_LIMIT = 30.0


class RankDeficientError(ValueError):
    """The weighted design matrix is (numerically) collinear."""


@dataclass(frozen=True)
class FittedGLM:
    spec: ModelSpec
    link: str
    n_iterations: int
    converged: bool
    max_abs_score: float
    diagnostic: str = ""

    @property
    def coefficients(self) -> np.ndarray:
        return self.spec.coefficients


@dataclass(frozen=True)
class IRLSResult:
    beta: np.ndarray
    n_iterations: int
    converged: bool
    max_abs_score: float
    diagnostic: str = ""


def _check_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"weights must have shape ({n},)")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    if not np.any(w > 0):
        raise ValueError("all weights are zero")
    return w


def check_rank(X: np.ndarray, sqrt_w: np.ndarray) -> None:
    """Raise :class:`RankDeficientError` when ``diag(sqrt_w) X`` is collinear."""
    if X.shape[1] == 0:
        return
    Xw = X * sqrt_w[:, None]
    if X.shape[0] < X.shape[1]:
        raise RankDeficientError("fewer rows than design columns")
    R = scipy.linalg.qr(Xw, mode="r", pivoting=True)[0]
    d = np.abs(np.diag(R))
    if d[0] == 0 or d[-1] <= PIVOT_TOL * d[0]:
        raise RankDeficientError(f"design is rank deficient (pivot ratio {d[-1] / max(d[0], 1e-300):.2e})")


def wls(X: np.ndarray, y: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted least squares via pivoted QR; raises on rank deficiency."""
    sw = np.sqrt(weights)
    Q, R, piv = scipy.linalg.qr(X * sw[:, None], mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size and (d[0] == 0 or d[-1] <= PIVOT_TOL * d[0]):
        raise RankDeficientError("design is rank deficient at the given weights")
    beta = np.empty(X.shape[1])
    beta[piv] = scipy.linalg.solve_triangular(R, Q.T @ (y * sw))
    return beta


def _deviance(eta: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    # -2 * weighted Bernoulli log-likelihood, written to stay finite for large |eta|
    return 2.0 * float(np.dot(w, np.logaddexp(0.0, eta) - y * eta))


def irls(X: np.ndarray, y: np.ndarray, weights: np.ndarray, offset: np.ndarray | None = None,
         beta0: np.ndarray | None = None) -> IRLSResult:
    """Logistic regression of ``y`` (values in [0, 1]) on ``X`` by Newton-Raphson."""
    p = X.shape[1]
    off = 0.0 if offset is None else offset
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    active = y[weights > 0]
    if active.size and (np.all(active == 0) or np.all(active == 1)):
        # MLE at infinity; Newton steps shrink toward 1 so the step rule never fires
        score = X.T @ (weights * (y - expit(X @ beta + off)))
        return IRLSResult(beta, 0, False, float(np.max(np.abs(score), initial=0.0)),
                          "separation: outcome is constant")
    eta = X @ beta + off
    dev = _deviance(eta, y, weights)
    prev_step = np.inf
    diagnostic = ""
    n_iter = 0
    score = X.T @ (weights * (y - expit(eta)))
    while True:
        max_score = float(np.max(np.abs(score))) if p else 0.0
        if max_score <= SCORE_TOL:
            return IRLSResult(beta, n_iter, True, max_score)
        if n_iter >= MAX_ITER:
            return IRLSResult(beta, n_iter, False, max_score, "iteration cap reached")
        mu = expit(eta)
        H = X.T @ (X * (weights * mu * (1.0 - mu))[:, None])
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            return IRLSResult(beta, n_iter, False, max_score, "singular information matrix")
        t = 1.0
        while True:
            cand = beta + t * step
            cand_eta = X @ cand + off
            cand_dev = _deviance(cand_eta, y, weights)
            if cand_dev <= dev + 1e-12 * abs(dev) or t < 2.0 ** -30:
                break
            t *= 0.5
        beta, eta, dev = cand, cand_eta, cand_dev
        n_iter += 1
        size = float(np.max(np.abs(t * step)))
        score = X.T @ (weights * (y - expit(eta)))
        if np.max(np.abs(eta)) > ETA_LIMIT and size >= prev_step:
            diagnostic = "separation: linear predictor beyond +/-30 with non-decreasing steps"
            return IRLSResult(beta, n_iter, False, float(np.max(np.abs(score))), diagnostic)
        prev_step = size
        if size < STEP_TOL:
            max_score = float(np.max(np.abs(score)))
            ok = max_score <= SCORE_TOL
            return IRLSResult(beta, n_iter, ok, max_score, "" if ok else "stalled above score tolerance")


def _design(design: Sequence[Term | str]) -> tuple[Term, ...]:
    return parse_design(design)


def fit_linear_weighted(d: Dataset, design: Sequence[Term | str], weights=None,
                        outcome: np.ndarray | None = None) -> FittedGLM:
    """Weighted least-squares fit of ``Y`` (or ``outcome``) on ``design`` plus intercept.

    Raises
    ------
    RankDeficientError
        If the weighted design is collinear.
    ValueError
        If the weights are negative, non-finite or all zero.
    """
    terms = _design(design)
    X = design_matrix(terms, d)
    y = d.y if outcome is None else np.asarray(outcome, dtype=float)
    w = _check_weights(weights, d.n)
    beta = wls(X, y, w)
    score = X.T @ (w * (y - X @ beta))
    spec = ModelSpec(beta[0], tuple(zip(terms, beta[1:])), IDENTITY)
    return FittedGLM(spec, IDENTITY, 1, True, float(np.max(np.abs(score))))


def fit_logistic_weighted(d: Dataset, design: Sequence[Term | str], weights=None,
                          outcome: np.ndarray | None = None) -> FittedGLM:
    """Weighted logistic fit; ``outcome`` defaults to ``d.y`` and may be fractional.

    Separation and other failures come back as ``converged=False`` with a
    ``diagnostic`` instead of an exception; collinear designs still raise
    :class:`RankDeficientError`.
    """
    terms = _design(design)
    X = design_matrix(terms, d)
    y = d.y if outcome is None else np.asarray(outcome, dtype=float)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("logistic outcome values must lie in [0, 1]")
    w = _check_weights(weights, d.n)
    check_rank(X, np.sqrt(w))
    res = irls(X, y, w)
    spec = ModelSpec(res.beta[0], tuple(zip(terms, res.beta[1:])), LOGIT)
    return FittedGLM(spec, LOGIT, res.n_iterations, res.converged, res.max_abs_score,
                     res.diagnostic)


def predict(model: FittedGLM | ModelSpec, d: Dataset, treatment_override: int | None = None
            ) -> np.ndarray:
    """Fitted means on ``d``; ``treatment_override`` sets ``A`` before evaluation."""
    spec = model.spec if isinstance(model, FittedGLM) else model
    return spec.mean(d, treatment_override)
