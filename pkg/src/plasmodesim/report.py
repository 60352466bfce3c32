"""Summary tables (CSV and aligned text) and SVG figures."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datamodel import FRAMEWORKS, GENERATE_TREATMENT, SAMPLE_TREATMENT, EstimateRecord, TruthSet
from .harness import MetricsSummary

DISPLAY_NAMES = {"unadj": "Unadj", "match": "Match", "iptw": "IPTW", "tmle": "TMLE",
                 "glm_cm": "glmCM", "glm_ps": "glmPS", "msm": "MSM", "iptw_ht": "IPTW-HT"}
FRAMEWORK_TITLES = {SAMPLE_TREATMENT: "Sample Treatment", GENERATE_TREATMENT: "Generate Treatment"}
ESTIMAND_TITLES = {"ate": "ATE", "rr": "RR", "logcor": "logcOR", "ey1": "EY1", "ey0": "EY0"}
METRIC_HEADERS = ("%Bias", "SE", "RMSE", "Bias:SE", "CP")

SUMMARY_COLUMNS = ("estimand", "framework", "estimator", "truth", "mean", "bias", "pct_bias",
                   "se", "rmse", "bias_se", "coverage", "n_replicates", "n_converged")


def _num(x: float | None) -> str:
    if x is None:
        return ""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def write_summary_csv(path: str | Path, summaries: Iterable[MetricsSummary]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            w.writerow([s.estimand, s.framework, s.estimator_id, _num(s.truth), _num(s.mean),
                        _num(s.bias), _num(s.pct_bias), _num(s.se), _num(s.rmse),
                        _num(s.bias_se), _num(s.coverage), s.n_replicates, s.n_converged])


def _cell(x: float | None, digits: int = 3) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    if math.isinf(x):
        return "inf"
    return f"{x:.{digits}f}"


def text_table(summaries: Sequence[MetricsSummary], estimand: str, title: str = "") -> str:
    """Aligned table: estimators down, metrics grouped by framework across.

    When the truth is zero the %Bias column holds the absolute bias instead
    and the header says so.
    """
    rows = [s for s in summaries if s.estimand == estimand]
    frameworks = [f for f in FRAMEWORKS if any(s.framework == f for s in rows)]
    estimators = list(dict.fromkeys(s.estimator_id for s in rows))
    if not rows:
        return ""
    truth = rows[0].truth
    metrics = list(METRIC_HEADERS)
    if truth == 0:
        metrics[0] = "Bias"
    label_w, col_w = 10, 9
    group_w = col_w * len(metrics)
    lines = []
    head = f"{ESTIMAND_TITLES.get(estimand, estimand)} (truth {truth:.4f})"
    lines.append(f"{title}  {head}".strip())
    lines.append(" " * label_w + "   ".join(f"{FRAMEWORK_TITLES[f]:^{group_w}}" for f in frameworks))
    lines.append(f"{'Estimator':<{label_w}}" + "   ".join(
        "".join(f"{m:>{col_w}}" for m in metrics) for _ in frameworks))
    lookup = {(s.framework, s.estimator_id): s for s in rows}
    for e in estimators:
        groups = []
        for f in frameworks:
            s = lookup.get((f, e))
            if s is None:
                groups.append("".join(f"{'-':>{col_w}}" for _ in metrics))
                continue
            first = s.bias if truth == 0 else s.pct_bias
            vals = (first, s.se, s.rmse, s.bias_se, s.coverage)
            digits = (3, 3, 3, 3, 1)
            groups.append("".join(f"{_cell(v, d):>{col_w}}" for v, d in zip(vals, digits)))
        lines.append(f"{DISPLAY_NAMES.get(e, e):<{label_w}}" + "   ".join(groups))
    return "\n".join(line.rstrip() for line in lines)


def markdown_report(summaries: Sequence[MetricsSummary], estimands: Sequence[str], heading: str,
                    notes: Sequence[str] = ()) -> str:
    parts = [f"# {heading}", ""]
    parts.extend(notes)
    if notes:
        parts.append("")
    for est in estimands:
        table = text_table(summaries, est)
        if table:
            parts += ["```", table, "```", ""]
    parts.append("CP is Wald coverage (%) using the empirical SE. Non-converged replicates are "
                 "excluded; counts are in summary.csv.")
    return "\n".join(parts) + "\n"


# --- figures ------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "plasmodesim"
    return plt


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def coverage_figure(summaries: Sequence[MetricsSummary], estimand: str, path: str | Path) -> Path:
    """Grouped bars of coverage per estimator and framework, with the 95% line."""
    plt = _pyplot()
    rows = [s for s in summaries if s.estimand == estimand]
    estimators = list(dict.fromkeys(s.estimator_id for s in rows))
    frameworks = [f for f in FRAMEWORKS if any(s.framework == f for s in rows)]
    lookup = {(s.framework, s.estimator_id): s.coverage for s in rows}
    x = np.arange(len(estimators))
    width = 0.8 / max(1, len(frameworks))
    fig, ax = plt.subplots(figsize=(7, 3.6))
    for k, f in enumerate(frameworks):
        vals = [lookup.get((f, e), np.nan) for e in estimators]
        ax.bar(x + (k - (len(frameworks) - 1) / 2) * width, vals, width,
               label=FRAMEWORK_TITLES[f], color=("#8c8c8c", "#2b6cb0")[k % 2])
    ax.axhline(95.0, color="black", lw=0.8, ls="--")
    ax.set_xticks(x, [DISPLAY_NAMES.get(e, e) for e in estimators])
    ax.set_ylim(0, 100)
    ax.set_ylabel("Coverage (%)")
    ax.set_title(f"{ESTIMAND_TITLES.get(estimand, estimand)} coverage")
    ax.legend(frameon=False, loc="lower right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    _save(fig, path)
    plt.close(fig)
    return path


def error_figure(records: Sequence[EstimateRecord], truths: TruthSet, estimand: str,
                 path: str | Path) -> Path:
    """Boxplots of ``estimate - truth`` per estimator, one panel per framework."""
    plt = _pyplot()
    truth = truths.get(estimand)
    frameworks = [f for f in FRAMEWORKS if any(r.framework == f for r in records)]
    estimators = list(dict.fromkeys(r.estimator_id for r in records
                                    if r.get(estimand) is not None))
    fig, axes = plt.subplots(1, len(frameworks), figsize=(4.2 * len(frameworks), 3.6),
                             sharey=True, squeeze=False)
    for ax, f in zip(axes[0], frameworks):
        data = []
        for e in estimators:
            v = [r.get(estimand) - truth for r in records
                 if r.framework == f and r.estimator_id == e and r.converged
                 and r.get(estimand) is not None and math.isfinite(r.get(estimand))]
            data.append(v if v else [np.nan])
        ax.boxplot(data, showfliers=False)
        ax.set_xticks(range(1, len(estimators) + 1),
                      [DISPLAY_NAMES.get(e, e) for e in estimators], rotation=45)
        ax.axhline(0.0, color="black", lw=0.8, ls="--")
        ax.set_title(FRAMEWORK_TITLES[f], fontsize=10)
    axes[0][0].set_ylabel(f"{ESTIMAND_TITLES.get(estimand, estimand)} error")
    fig.tight_layout()
    path = Path(path)
    _save(fig, path)
    plt.close(fig)
    return path
