import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plasmodesim.datamodel import (FRAMEWORKS, GENERATE_TREATMENT, SAMPLE_TREATMENT,
                                   EstimateRecord, TruthSet, write_records_csv)
from plasmodesim.dgm import get_scenario
from plasmodesim.harness import (RngStream, multi_source_study, replicate_stream, run_monte_carlo,
                                 summarize, summary_from_values)


def recs(values, eid="iptw", fw=SAMPLE_TREATMENT):
    return [EstimateRecord(eid, v, 0.0, v, replicate_index=i, framework=fw)
            for i, v in enumerate(values)]


class TestSummarize:
    def test_all_equal_to_truth(self):
        s = summary_from_values([2.0, 2.0, 2.0], 2.0)
        assert (s.pct_bias, s.rmse, s.se, s.bias_se, s.coverage) == (0.0, 0.0, 0.0, 0.0, 100.0)

    def test_symmetric_pair(self):
        s = summary_from_values([1.0, 3.0], 2.0)
        assert s.pct_bias == 0.0 and s.rmse == 1.0 and s.se == pytest.approx(math.sqrt(2))
        assert s.bias_se == 0.0 and s.coverage == 100.0

    def test_pure_bias(self):
        s = summary_from_values([3.0] * 4, 2.0)
        assert s.pct_bias == 50.0 and s.se == 0.0 and s.bias_se == math.inf
        assert s.coverage == 0.0

    def test_zero_truth_reports_absolute_bias(self):
        s = summary_from_values([0.1, 0.3], 0.0)
        assert s.pct_bias is None and s.bias == pytest.approx(0.2)

    def test_excludes_non_converged(self):
        rows = recs([1.0, 3.0, 100.0])
        rows[2] = EstimateRecord("iptw", math.nan, math.nan, math.nan, converged=False,
                                 replicate_index=2, framework=SAMPLE_TREATMENT)
        (s,) = summarize(rows, TruthSet(0, 0, 2.0), "ate")
        assert s.n_replicates == 3 and s.n_converged == 2 and s.mean == 2.0

    def test_cells_without_estimand_are_omitted(self):
        rows = recs([1.0, 2.0]) + [EstimateRecord("msm", 0, 0, 0, logcor=0.5,
                                                  framework=SAMPLE_TREATMENT),
                                   EstimateRecord("msm", 0, 0, 0, logcor=0.7,
                                                  framework=SAMPLE_TREATMENT)]
        out = summarize(rows, TruthSet(0, 0, 0, logcor=0.6), "logcor")
        assert [s.estimator_id for s in out] == ["msm"]

    def test_missing_truth(self):
        with pytest.raises(ValueError):
            summarize(recs([1.0, 2.0]), TruthSet(0, 0, 0), "rr")

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=40),
           st.floats(0.5, 10), st.randoms(use_true_random=False))
    def test_identities_and_permutation_invariance(self, values, truth, rnd):
        s = summary_from_values(values, truth)
        assert 0.0 <= s.coverage <= 100.0
        R = len(values)
        lhs = s.rmse ** 2
        rhs = s.bias ** 2 + s.se ** 2 * (R - 1) / R
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-12)
        shuffled = list(values)
        rnd.shuffle(shuffled)
        t = summary_from_values(shuffled, truth)
        assert (t.mean, t.se, t.rmse, t.coverage) == (s.mean, s.se, s.rmse, s.coverage)


class TestStreams:
    def test_pure_function_of_key(self):
        a = RngStream(5, "replicate", (0, 1, 7)).generator().random(5)
        b = RngStream(5, "replicate", (0, 1, 7)).generator().random(5)
        assert np.array_equal(a, b)

    def test_distinct_keys_differ(self):
        draws = {replicate_stream(5, f, r).generator().random() for f in FRAMEWORKS
                 for r in range(50)}
        assert len(draws) == 100
        assert RngStream(5, "source", (0,)).generator().random() != \
            RngStream(6, "source", (0,)).generator().random()

    def test_smoke_battery(self):
        x = np.concatenate([replicate_stream(11, SAMPLE_TREATMENT, r).generator().random(2000)
                            for r in range(50)])
        assert abs(x.mean() - 0.5) < 4 * math.sqrt(1 / 12 / x.size)
        assert abs(x.var() - 1 / 12) < 0.002
        lag1 = np.corrcoef(x[:-1], x[1:])[0, 1]
        assert abs(lag1) < 4 / math.sqrt(x.size)
        firsts = [replicate_stream(11, SAMPLE_TREATMENT, r).generator().random()
                  for r in range(2000)]
        assert abs(np.corrcoef(firsts[:-1], firsts[1:])[0, 1]) < 4 / math.sqrt(2000)


class TestMonteCarlo:
    def test_row_count(self):
        res = run_monte_carlo(get_scenario("S1"), 200, FRAMEWORKS, ["unadj"], 1, 3)
        assert len(res.records) == 2

    def test_canonical_order(self):
        res = run_monte_carlo(get_scenario("S2"), 200, FRAMEWORKS, ["iptw", "unadj"], 3, 3)
        keys = [(r.framework, r.replicate_index, r.estimator_id) for r in res.records]
        expect = [(f, r, e) for f in FRAMEWORKS for r in range(3) for e in ("iptw", "unadj")]
        assert keys == expect

    def test_bitwise_identical_across_worker_counts(self, tmp_path):
        spec = get_scenario("S2")
        ests = ["unadj", "iptw", "tmle", "match"]
        one = run_monte_carlo(spec, 300, FRAMEWORKS, ests, 30, 42, workers=1, block_size=7)
        two = run_monte_carlo(spec, 300, FRAMEWORKS, ests, 30, 42, workers=3, block_size=4)
        write_records_csv(tmp_path / "a.csv", one.records)
        write_records_csv(tmp_path / "b.csv", two.records)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_framework_subset_uses_same_streams(self):
        spec = get_scenario("S1")
        both = run_monte_carlo(spec, 200, FRAMEWORKS, ["iptw"], 5, 9)
        gen = run_monte_carlo(spec, 200, [GENERATE_TREATMENT], ["iptw"], 5, 9)
        assert [r.ate for r in both.records if r.framework == GENERATE_TREATMENT] == \
            [r.ate for r in gen.records]

    def test_validation(self):
        with pytest.raises(ValueError):
            run_monte_carlo(get_scenario("S1"), 100, FRAMEWORKS, ["unadj"], 0, 1)
        with pytest.raises(ValueError):
            run_monte_carlo(get_scenario("S1"), 100, ["nope"], ["unadj"], 2, 1)

    def test_failures_do_not_abort(self):
        # a 15-row source routinely yields replicates with an empty arm
        res = run_monte_carlo(get_scenario("S1"), 15, FRAMEWORKS, ["unadj", "iptw"], 40, 2)
        assert len(res.records) == 160
        assert any(not r.converged for r in res.records)

    def test_unfittable_source_is_reported(self):
        with pytest.raises(RuntimeError, match="source"):
            run_monte_carlo(get_scenario("S1"), 3, FRAMEWORKS, ["unadj"], 2, 2)


def test_multi_source_block_count():
    study = multi_source_study(get_scenario("S1"), 200, FRAMEWORKS, ["unadj"], 10, 2, 5)
    assert len(study.per_source) == 2
    assert len(study.aggregates) == 2
    agg = study.aggregate("unadj", SAMPLE_TREATMENT)
    assert agg.median_bias_se == pytest.approx(np.median(study.bias_se("unadj", SAMPLE_TREATMENT)))
    with pytest.raises(ValueError):
        multi_source_study(get_scenario("S1"), 200, FRAMEWORKS, ["unadj"], 10, 1, 5)
