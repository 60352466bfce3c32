"""Deterministic Monte Carlo driver and performance metrics.

Every random draw comes from a substream keyed by ``(master_seed, purpose,
index)``. Replicate ``r`` of framework ``f`` always sees the same stream,
whatever the number of workers, and records are emitted in canonical
``(framework, replicate, estimator)`` order.
"""
from __future__ import annotations

import math
import multiprocessing
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .datamodel import FRAMEWORKS, EstimateRecord, SourceDataset, TruthSet
from .dgm import ScenarioSpec, WorkingModels, generate_source
from .estimators import ESTIMATORS, check_estimators, estimate_all
from .plasmode import PlasmodeConfig, draw_replicate, resolve_generation_models

Z_95 = 1.96
_FRAMEWORK_CODE = {f: i for i, f in enumerate(FRAMEWORKS)}


@dataclass(frozen=True)
class RngStream:
    """Substream ``(master_seed, purpose, *index)`` of a PCG64 family."""

    master_seed: int
    purpose: str
    index: tuple[int, ...] = ()

    def seed_sequence(self) -> np.random.SeedSequence:
        key = (zlib.crc32(self.purpose.encode()),) + tuple(int(i) for i in self.index)
        return np.random.SeedSequence(entropy=int(self.master_seed), spawn_key=key)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence()))

    def seed_int(self) -> int:
        """A 64-bit integer seed derived from this stream."""
        return int(self.seed_sequence().generate_state(1, np.uint64)[0])


def source_stream(master_seed: int, k: int = 0) -> RngStream:
    return RngStream(master_seed, "source", (k,))


def replicate_stream(master_seed: int, framework: str, r: int, k: int = 0) -> RngStream:
    return RngStream(master_seed, "replicate", (k, _FRAMEWORK_CODE[framework], r))


@dataclass(frozen=True, eq=False)
class MonteCarloResult:
    source: SourceDataset
    records: tuple[EstimateRecord, ...]
    frameworks: tuple[str, ...]
    estimators: tuple[str, ...]
    replicates: int

    @property
    def truths(self) -> TruthSet:
        return self.source.truths


# Worker state is installed once per process (inherited on fork) instead of
# being pickled with every task.
_STATE: dict = {}


def _install(state: dict) -> None:
    _STATE.clear()
    _STATE.update(state)


def _run_block(framework: str, start: int, stop: int) -> list[EstimateRecord]:
    st = _STATE
    cfg = replace(st["config"], framework=framework)
    models = st["models"][framework]
    out = []
    for r in range(start, stop):
        rng = replicate_stream(st["master_seed"], framework, r, st["source_index"]).generator()
        d = draw_replicate(st["source"], models, cfg, rng)
        for rec in estimate_all(d, st["wm"], st["estimators"]):
            out.append(replace(rec, replicate_index=r, framework=framework))
    return out


def _blocks(frameworks, R: int, size: int):
    for f in frameworks:
        for start in range(0, R, size):
            yield f, start, min(R, start + size)


def run_monte_carlo(scenario: ScenarioSpec, n: int, frameworks: Iterable[str],
                    estimators: Iterable[str], R: int, master_seed: int, *, workers: int = 1,
                    source: SourceDataset | None = None, source_index: int = 0,
                    config: PlasmodeConfig | None = None, working_models: WorkingModels | None = None,
                    block_size: int = 250) -> MonteCarloResult:
    """Generate (or reuse) one source and run ``R`` replicates per framework.

    ``source`` overrides generation from the ``('source', source_index)``
    stream. Estimator failures become non-converged records.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    frameworks = tuple(f for f in FRAMEWORKS if f in set(frameworks))
    if not frameworks:
        raise ValueError("no frameworks requested")
    estimators = check_estimators(estimators)
    if source is None:
        source = generate_source(scenario, n, source_stream(master_seed, source_index).seed_int())
    config = config or PlasmodeConfig()
    wm = working_models or scenario.working_models()
    models = {f: resolve_generation_models(scenario, source, replace(config, framework=f))
              for f in frameworks}
    state = dict(config=config, models=models, master_seed=master_seed, source=source,
                 source_index=source_index, wm=wm, estimators=estimators)
    blocks = list(_blocks(frameworks, R, block_size))
    if workers <= 1 or len(blocks) == 1:
        _install(state)
        chunks = [_run_block(*b) for b in blocks]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_install,
                                 initargs=(state,)) as pool:
            futures = [pool.submit(_run_block, *b) for b in blocks]
            chunks = [f.result() for f in futures]
    # blocks were issued in canonical order and each block is internally ordered
    records = tuple(r for chunk in chunks for r in chunk)
    return MonteCarloResult(source, records, frameworks, estimators, R)


# --- metrics ------------------------------------------------------------

@dataclass(frozen=True)
class MetricsSummary:
    estimator_id: str
    framework: str
    estimand: str
    truth: float
    mean: float
    bias: float
    pct_bias: float | None
    se: float
    rmse: float
    bias_se: float
    coverage: float
    n_replicates: int
    n_converged: int


def _metrics(values: Sequence[float], truth: float, z: float = Z_95):
    k = len(values)
    v = np.asarray(values, dtype=float)
    mean = math.fsum(v) / k
    bias = mean - truth
    pct = 100.0 * bias / truth if truth != 0 else None
    if k < 2:
        return mean, bias, pct, math.nan, math.nan, math.nan, math.nan
    se = math.sqrt(math.fsum((v - mean) ** 2) / (k - 1))
    rmse = math.sqrt(math.fsum((v - truth) ** 2) / k)
    if se == 0:
        bias_se = 0.0 if bias == 0 else math.inf
    else:
        bias_se = abs(bias) / se
    coverage = 100.0 * float(np.count_nonzero(np.abs(v - truth) <= z * se)) / k
    return mean, bias, pct, se, rmse, bias_se, coverage


def summary_from_values(values: Sequence[float], truth: float, estimator_id: str = "",
                        framework: str = "", estimand: str = "ate", n_replicates: int | None = None
                        ) -> MetricsSummary:
    values = list(values)
    mean, bias, pct, se, rmse, bias_se, cov = _metrics(values, truth)
    return MetricsSummary(estimator_id, framework, estimand, truth, mean, bias, pct, se, rmse,
                          bias_se, cov, len(values) if n_replicates is None else n_replicates,
                          len(values))


def _estimator_rank(eid: str) -> tuple[int, str]:
    order = list(ESTIMATORS)
    return (order.index(eid), eid) if eid in order else (len(order), eid)


def summarize(records: Iterable[EstimateRecord], truths: TruthSet, estimand: str
              ) -> list[MetricsSummary]:
    """One summary per ``(framework, estimator)`` cell, in canonical order.

    Non-converged records, and records without a value for ``estimand``, are
    excluded and show up as ``n_replicates - n_converged``. Cells where no
    record carries the estimand at all are omitted.
    """
    truth = truths.get(estimand)
    if truth is None:
        raise ValueError(f"no truth available for estimand {estimand!r}")
    cells: dict[tuple[str, str], list] = {}
    for rec in records:
        cells.setdefault((rec.framework, rec.estimator_id), []).append(rec)
    out = []
    for (fw, eid) in sorted(cells, key=lambda c: (_FRAMEWORK_CODE.get(c[0], 99), c[0],
                                                  _estimator_rank(c[1]))):
        recs = cells[(fw, eid)]
        if all(r.get(estimand) is None for r in recs):
            continue
        vals = [r.get(estimand) for r in recs if r.converged and r.get(estimand) is not None
                and math.isfinite(r.get(estimand))]
        if not vals:
            out.append(MetricsSummary(eid, fw, estimand, truth, math.nan, math.nan, None, math.nan,
                                      math.nan, math.nan, math.nan, len(recs), 0))
            continue
        out.append(summary_from_values(vals, truth, eid, fw, estimand, len(recs)))
    return out


def find_summary(summaries: Iterable[MetricsSummary], estimator_id: str, framework: str
                 ) -> MetricsSummary:
    for s in summaries:
        if s.estimator_id == estimator_id and s.framework == framework:
            return s
    raise KeyError((estimator_id, framework))


# --- multiple sources ---------------------------------------------------

@dataclass(frozen=True)
class SourceSummary:
    source_index: int
    source: SourceDataset
    summaries: tuple[MetricsSummary, ...]


@dataclass(frozen=True)
class CrossSourceAggregate:
    estimator_id: str
    framework: str
    estimand: str
    median_bias_se: float
    q25_bias_se: float
    q75_bias_se: float
    n_sources: int


@dataclass(frozen=True)
class MultiSourceResult:
    per_source: tuple[SourceSummary, ...]
    aggregates: tuple[CrossSourceAggregate, ...]

    def aggregate(self, estimator_id: str, framework: str) -> CrossSourceAggregate:
        for a in self.aggregates:
            if a.estimator_id == estimator_id and a.framework == framework:
                return a
        raise KeyError((estimator_id, framework))

    def bias_se(self, estimator_id: str, framework: str) -> list[float]:
        return [find_summary(s.summaries, estimator_id, framework).bias_se for s in self.per_source]


def multi_source_study(scenario: ScenarioSpec, n: int, frameworks: Iterable[str],
                       estimators: Iterable[str], R: int, n_sources: int, master_seed: int,
                       estimand: str = "ate", *, workers: int = 1,
                       config: PlasmodeConfig | None = None) -> MultiSourceResult:
    """Repeat :func:`run_monte_carlo` over sources ``0 .. n_sources-1`` and aggregate bias:SE."""
    if n_sources < 2:
        raise ValueError("n_sources must be at least 2")
    frameworks = tuple(frameworks)
    estimators = tuple(estimators)
    per = []
    for k in range(n_sources):
        res = run_monte_carlo(scenario, n, frameworks, estimators, R, master_seed, workers=workers,
                              source_index=k, config=config)
        per.append(SourceSummary(k, res.source, tuple(summarize(res.records, res.truths, estimand))))
    aggs = []
    for s in per[0].summaries:
        vals = np.array([find_summary(p.summaries, s.estimator_id, s.framework).bias_se
                         for p in per])
        q25, med, q75 = np.quantile(vals, [0.25, 0.5, 0.75])
        aggs.append(CrossSourceAggregate(s.estimator_id, s.framework, estimand, float(med),
                                         float(q25), float(q75), n_sources))
    return MultiSourceResult(tuple(per), tuple(aggs))
