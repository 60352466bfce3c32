"""Treatment-effect estimators applied to each plasmode replicate.

Every estimator returns an :class:`EstimateRecord`. Fit failures produce a
record with ``converged=False`` (and NaN estimates unless a fallback value is
defined) rather than raising.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy.special import expit, logit

from .datamodel import BINARY, Dataset, EstimateRecord
from .design import TREATMENT
from .dgm import WorkingModels
from .glm import (FittedGLM, RankDeficientError, fit_linear_weighted, fit_logistic_weighted, irls,
                  wls)

TMLE_Q_BOUND = 0.0005

UNADJ, MATCH, IPTW, TMLE, GLM_CM, GLM_PS, MSM = ("unadj", "match", "iptw", "tmle", "glm_cm",
                                                  "glm_ps", "msm")
IPTW_HT = "iptw_ht"
STANDARD_ESTIMATORS = (UNADJ, MATCH, IPTW, TMLE, GLM_CM, GLM_PS, MSM)

_PS_TERM = "PS"


@dataclass(frozen=True, eq=False)
class WeightVector:
    values: np.ndarray
    cap_applied: bool
    cap_value: float

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def weight_cap(n: int) -> float:
    """Upper bound ``sqrt(n) ln(n) / 5`` on stabilized weights."""
    return math.sqrt(n) * math.log(n) / 5.0


def tmle_ps_bound(n: int) -> float:
    """Lower truncation ``5 / (sqrt(n) ln(n))`` for TMLE propensity scores."""
    return 5.0 / (math.sqrt(n) * math.log(n))


def _failed(eid: str, ey1=math.nan, ey0=math.nan, ate=math.nan, rr=None, logcor=None
            ) -> EstimateRecord:
    return EstimateRecord(eid, ey1, ey0, ate, rr, logcor, converged=False)


def _record(eid: str, d: Dataset, ey1: float, ey0: float, converged: bool = True,
            logcor: float | None = None) -> EstimateRecord:
    rr = None
    if d.outcome_kind == BINARY and ey0 != 0 and math.isfinite(ey0):
        rr = ey1 / ey0
    return EstimateRecord(eid, float(ey1), float(ey0), float(ey1 - ey0), rr, logcor, converged)


def _both_arms(d: Dataset) -> bool:
    s = float(d.a.sum())
    return 0 < s < d.n


def fit_ps(d: Dataset, wm: WorkingModels) -> FittedGLM | None:
    """Logistic PS fit; ``None`` when it fails or the design is collinear."""
    try:
        fit = fit_logistic_weighted(d, wm.ps_design, outcome=d.a)
    except RankDeficientError:
        return None
    return fit if fit.converged else None


def fit_outcome(d: Dataset, design, weights=None) -> FittedGLM | None:
    try:
        if d.outcome_kind == BINARY:
            fit = fit_logistic_weighted(d, design, weights)
        else:
            fit = fit_linear_weighted(d, design, weights)
    except RankDeficientError:
        return None
    return fit if fit.converged else None


def compute_stabilized_weights(d: Dataset, ps_fit: FittedGLM | np.ndarray, n: int | None = None
                               ) -> WeightVector:
    """``p_A / g`` for treated rows and ``(1 - p_A) / (1 - g)`` for controls, capped.

    ``ps_fit`` may be a fitted model or the vector of fitted probabilities.
    """
    g = ps_fit.spec.mean(d) if isinstance(ps_fit, FittedGLM) else np.asarray(ps_fit, dtype=float)
    n = d.n if n is None else n
    p_a = float(d.a.mean())
    with np.errstate(divide="ignore"):
        w = np.where(d.a == 1, p_a / g, (1.0 - p_a) / (1.0 - g))
    cap = weight_cap(n)
    over = w > cap
    return WeightVector(np.where(over, cap, w), bool(np.any(over)), cap)


def estimate_unadj(d: Dataset, wm: WorkingModels | None = None, **_) -> EstimateRecord:
    if not _both_arms(d):
        return _failed(UNADJ)
    treated = d.a == 1
    return _record(UNADJ, d, d.y[treated].mean(), d.y[~treated].mean())


def _weighted_arm_regression(d: Dataset, w: np.ndarray) -> tuple[float, float]:
    X = np.column_stack([np.ones(d.n), d.a])
    b = wls(X, d.y, w)
    return b[0] + b[1], b[0]


def estimate_iptw(d: Dataset, wm: WorkingModels, ps_fit: FittedGLM | None = None, **_
                  ) -> EstimateRecord:
    """Weighted regression of ``Y`` on ``A`` with capped stabilized weights."""
    if not _both_arms(d):
        return _failed(IPTW)
    ps_fit = ps_fit or fit_ps(d, wm)
    if ps_fit is None:
        return _failed(IPTW)
    w = compute_stabilized_weights(d, ps_fit)
    try:
        ey1, ey0 = _weighted_arm_regression(d, w.values)
    except RankDeficientError:
        return _failed(IPTW)
    return _record(IPTW, d, ey1, ey0)


def estimate_iptw_ht(d: Dataset, wm: WorkingModels, ps_fit: FittedGLM | None = None, **_
                     ) -> EstimateRecord:
    """Unnormalized Horvitz-Thompson means ``n^-1 sum A Y / g`` (diagnostic, uncapped)."""
    if not _both_arms(d):
        return _failed(IPTW_HT)
    ps_fit = ps_fit or fit_ps(d, wm)
    if ps_fit is None:
        return _failed(IPTW_HT)
    g = ps_fit.spec.mean(d)
    ey1 = float(np.sum(d.a * d.y / g)) / d.n
    ey0 = float(np.sum((1 - d.a) * d.y / (1 - g))) / d.n
    return _record(IPTW_HT, d, ey1, ey0)


def estimate_glm_cm(d: Dataset, wm: WorkingModels, outcome_fit: FittedGLM | None = None, **_
                    ) -> EstimateRecord:
    """G-computation: average the fitted outcome model at ``A=1`` and ``A=0``."""
    fit = outcome_fit or fit_outcome(d, wm.outcome_design)
    if fit is None:
        return _failed(GLM_CM)
    return _record(GLM_CM, d, fit.spec.mean(d, 1).mean(), fit.spec.mean(d, 0).mean())


def estimate_glm_ps(d: Dataset, wm: WorkingModels, ps_fit: FittedGLM | None = None, **_
                    ) -> EstimateRecord:
    """Outcome regression on ``A`` and the fitted PS as a linear term."""
    if not _both_arms(d):
        return _failed(GLM_PS)
    ps_fit = ps_fit or fit_ps(d, wm)
    if ps_fit is None:
        return _failed(GLM_PS)
    g = ps_fit.spec.mean(d)
    design: tuple = (TREATMENT,)
    aug = d
    if np.ptp(g) > 1e-12 * max(1.0, float(np.abs(g).max())):
        aug = d.with_covariate(_PS_TERM, g)
        design = (TREATMENT, _PS_TERM)
    fit = fit_outcome(aug, design)
    if fit is None:
        return _failed(GLM_PS)
    return _record(GLM_PS, d, fit.spec.mean(aug, 1).mean(), fit.spec.mean(aug, 0).mean())


def _bound(p: np.ndarray, lo: float) -> np.ndarray:
    return np.clip(p, lo, 1.0 - lo)


def tmle_fluctuate(y: np.ndarray, a: np.ndarray, q1: np.ndarray, q0: np.ndarray, g: np.ndarray):
    """Two-epsilon logistic fluctuation of initial predictions on the [0, 1] scale.

    Returns ``(q1_star, q0_star, converged)``. Clever covariates are
    ``H1 = A / g`` and ``H0 = -(1 - A) / (1 - g)``.
    """
    h1 = a / g
    h0 = -(1 - a) / (1 - g)
    qa = np.where(a == 1, q1, q0)
    res = irls(np.column_stack([h1, h0]), y, np.ones(len(y)), offset=logit(qa))
    if not res.converged:
        return q1, q0, False
    e1, e0 = res.beta
    q1s = expit(logit(q1) + e1 / g)
    q0s = expit(logit(q0) - e0 / (1 - g))
    return q1s, q0s, True


def estimate_tmle(d: Dataset, wm: WorkingModels, ps_fit: FittedGLM | None = None,
                  outcome_fit: FittedGLM | None = None, **_) -> EstimateRecord:
    lo_y, hi_y = float(d.y.min()), float(d.y.max())
    if lo_y == hi_y:
        # degenerate outcome: every counterfactual mean equals the constant
        return _record(TMLE, d, lo_y, lo_y)
    if not _both_arms(d):
        return _failed(TMLE)
    fit = outcome_fit or fit_outcome(d, wm.outcome_design)
    ps_fit = ps_fit or fit_ps(d, wm)
    if fit is None or ps_fit is None:
        return _failed(TMLE)
    g = _bound(ps_fit.spec.mean(d), tmle_ps_bound(d.n))
    span = hi_y - lo_y
    scale = lambda v: (v - lo_y) / span
    q1 = _bound(scale(fit.spec.mean(d, 1)), TMLE_Q_BOUND)
    q0 = _bound(scale(fit.spec.mean(d, 0)), TMLE_Q_BOUND)
    q1s, q0s, ok = tmle_fluctuate(scale(d.y), d.a, q1, q0, g)
    if not ok:
        # initial plug-in on the original scale
        return _record(TMLE, d, fit.spec.mean(d, 1).mean(), fit.spec.mean(d, 0).mean(),
                       converged=False)
    return _record(TMLE, d, lo_y + span * q1s.mean(), lo_y + span * q0s.mean())


def match_counts(values: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """How often each ``pool`` element is used when every entry of ``values`` is matched.

    Each value is matched to its nearest pool element(s). When several pool
    elements are equally close, the single match is split evenly among them,
    so the result is deterministic and independent of row order.
    """
    m = len(pool)
    order = np.argsort(pool, kind="stable")
    sv = pool[order]
    pos = np.searchsorted(sv, values, side="left")
    has_r = pos < m
    has_l = pos > 0
    r = np.minimum(pos, m - 1)
    l = np.maximum(pos - 1, 0)
    r_hi = np.searchsorted(sv, sv[r], side="right")
    l_lo = np.searchsorted(sv, sv[l], side="left")
    dr = np.where(has_r, sv[r] - values, np.inf)
    dl = np.where(has_l, values - sv[l], np.inf)
    use_r = has_r & (dr <= dl)
    use_l = has_l & (dl <= dr)
    count = use_r * (r_hi - r) + use_l * (pos - l_lo)
    share = 1.0 / count
    diff = np.zeros(m + 1)
    np.add.at(diff, r[use_r], share[use_r])
    np.add.at(diff, r_hi[use_r], -share[use_r])
    np.add.at(diff, l_lo[use_l], share[use_l])
    np.add.at(diff, pos[use_l], -share[use_l])
    uses = np.empty(m)
    uses[order] = np.cumsum(diff)[:m]
    return uses


def matching_weights(a: np.ndarray, score: np.ndarray) -> np.ndarray:
    """ATE weights from nearest-neighbour matching with replacement on ``score``.

    Each unit is matched to its nearest opposite-arm unit (ties split). A
    unit's weight is ``1 + f * K`` where ``K`` counts its uses as a match and
    ``f`` makes each arm's weights sum to ``n``.
    """
    n = len(a)
    treated = np.flatnonzero(a == 1)
    control = np.flatnonzero(a == 0)
    uses = np.zeros(n)
    uses[control] = match_counts(score[treated], score[control])
    uses[treated] = match_counts(score[control], score[treated])
    w = np.ones(n)
    for arm in (treated, control):
        f = (n - len(arm)) / uses[arm].sum()
        w[arm] += f * uses[arm]
    return w


def estimate_match(d: Dataset, wm: WorkingModels, ps_fit: FittedGLM | None = None, **_
                   ) -> EstimateRecord:
    if not _both_arms(d):
        return _failed(MATCH)
    ps_fit = ps_fit or fit_ps(d, wm)
    if ps_fit is None:
        return _failed(MATCH)
    w = matching_weights(d.a, ps_fit.spec.linear_predictor(d))
    ey1, ey0 = _weighted_arm_regression(d, w)
    return _record(MATCH, d, ey1, ey0)


def estimate_msm_logcor(d: Dataset, wm: WorkingModels, ps_fit: FittedGLM | None = None, **_
                        ) -> EstimateRecord:
    """Weighted logistic MSM with capped stabilized weights; ``logcor`` is the A coefficient."""
    if wm.msm_design is None:
        raise ValueError("estimate_msm_logcor needs WorkingModels.msm_design")
    if d.outcome_kind != BINARY:
        raise ValueError("the MSM estimator needs a binary outcome")
    if not _both_arms(d):
        return _failed(MSM)
    ps_fit = ps_fit or fit_ps(d, wm)
    if ps_fit is None:
        return _failed(MSM)
    w = compute_stabilized_weights(d, ps_fit)
    try:
        fit = fit_logistic_weighted(d, wm.msm_design, w.values)
    except RankDeficientError:
        return _failed(MSM)
    if not fit.converged:
        return _failed(MSM)
    logcor = fit.spec.coefficient(TREATMENT)
    return _record(MSM, d, fit.spec.mean(d, 1).mean(), fit.spec.mean(d, 0).mean(), logcor=logcor)


ESTIMATORS: dict[str, Callable[..., EstimateRecord]] = {
    UNADJ: estimate_unadj,
    MATCH: estimate_match,
    IPTW: estimate_iptw,
    TMLE: estimate_tmle,
    GLM_CM: estimate_glm_cm,
    GLM_PS: estimate_glm_ps,
    MSM: estimate_msm_logcor,
    IPTW_HT: estimate_iptw_ht,
}

_NEEDS_PS = {MATCH, IPTW, TMLE, GLM_PS, MSM, IPTW_HT}
_NEEDS_OUTCOME = {TMLE, GLM_CM}


def check_estimators(ids: Iterable[str]) -> tuple[str, ...]:
    ids = tuple(ids)
    unknown = [e for e in ids if e not in ESTIMATORS]
    if unknown:
        raise ValueError(f"unknown estimator(s): {', '.join(unknown)}")
    return ids


def estimate_all(d: Dataset, wm: WorkingModels, estimators: Iterable[str]) -> list[EstimateRecord]:
    """Run the requested estimators in order, fitting the PS and outcome models once.

    Any unexpected numerical exception in an estimator becomes a
    non-converged record.
    """
    ids = check_estimators(estimators)
    shared: dict = {}
    if _NEEDS_PS & set(ids) and _both_arms(d):
        shared["ps_fit"] = fit_ps(d, wm)
    if _NEEDS_OUTCOME & set(ids):
        shared["outcome_fit"] = fit_outcome(d, wm.outcome_design)
    out = []
    for eid in ids:
        kwargs = {k: v for k, v in shared.items() if v is not None}
        if eid in _NEEDS_PS and "ps_fit" in shared and shared["ps_fit"] is None:
            out.append(_failed(eid))
            continue
        try:
            out.append(ESTIMATORS[eid](d, wm, **kwargs))
        except (np.linalg.LinAlgError, RankDeficientError, FloatingPointError):
            out.append(_failed(eid))
    return out
