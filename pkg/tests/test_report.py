from plasmodesim.datamodel import GENERATE_TREATMENT, SAMPLE_TREATMENT, EstimateRecord, TruthSet
from plasmodesim.harness import summarize
from plasmodesim.report import coverage_figure, error_figure, markdown_report, text_table


def records(truth_shift=0.0):
    out = []
    for fw in (SAMPLE_TREATMENT, GENERATE_TREATMENT):
        for r, v in enumerate([1.9, 2.1, 2.3, 1.7]):
            for eid, off in (("unadj", 0.8), ("iptw", 0.0)):
                ate = v + off - truth_shift
                out.append(EstimateRecord(eid, ate + 10, 10.0, ate, replicate_index=r,
                                          framework=fw))
    return out


def test_text_table_layout():
    rows = summarize(records(), TruthSet(12.0, 10.0, 2.0), "ate")
    table = text_table(rows, "ate").splitlines()
    assert table[0] == "ATE (truth 2.0000)"
    assert table[1].split() == ["Sample", "Treatment", "Generate", "Treatment"]
    assert table[2].split() == ["Estimator"] + ["%Bias", "SE", "RMSE", "Bias:SE", "CP"] * 2
    assert [l.split()[0] for l in table[3:]] == ["Unadj", "IPTW"]
    assert table[3].split()[1:6] == ["40.000", "0.258", "0.831", "3.098", "25.0"]


def test_zero_truth_switches_to_absolute_bias():
    rows = summarize(records(2.0), TruthSet(10.0, 10.0, 0.0), "ate")
    assert text_table(rows, "ate").splitlines()[2].split()[1] == "Bias"


def test_markdown_report_sections():
    rows = summarize(records(), TruthSet(12.0, 10.0, 2.0), "ate")
    md = markdown_report(rows, ["ate"], "Toy")
    assert md.startswith("# Toy") and md.count("```") == 2


def test_figures_are_deterministic(tmp_path):
    truths = TruthSet(12.0, 10.0, 2.0)
    rows = summarize(records(), truths, "ate")
    for name in ("a", "b"):
        coverage_figure(rows, "ate", tmp_path / f"cov_{name}.svg")
        error_figure(records(), truths, "ate", tmp_path / f"err_{name}.svg")
    for kind in ("cov", "err"):
        a = (tmp_path / f"{kind}_a.svg").read_bytes()
        assert a.startswith(b"<?xml") and a == (tmp_path / f"{kind}_b.svg").read_bytes()
