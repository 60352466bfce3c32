"""Command-line entry point: ``plasmodesim {run,oracle,generate-source,report}``."""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import BUILTIN_CONFIGS, ConfigError, RunConfig, resolve_config, serialize_config
from .datamodel import (CsvFormatError, SourceDataset, load_dataset_csv, read_records_csv,
                        read_truths_csv, write_dataset_csv, write_records_csv, write_truths_csv)
from .design import DesignError
from .dgm import generate_source, source_from_dataset
from .harness import (MonteCarloResult, multi_source_study, run_monte_carlo, source_stream,
                      summarize)
from .oracle import OracleError, source_oracle
from .report import (coverage_figure, error_figure, markdown_report, text_table,
                     write_summary_csv)


def _source(cfg: RunConfig, k: int = 0) -> SourceDataset:
    spec = cfg.scenario_spec()
    if cfg.source_csv:
        data = load_dataset_csv(cfg.resolve(cfg.source_csv), spec.outcome_kind)
        return source_from_dataset(spec, data, seed=cfg.master_seed)
    return generate_source(spec, cfg.n, source_stream(cfg.master_seed, k).seed_int())


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed must be in [0, 2^64)", "--seed")
        cfg = replace(cfg, master_seed=args.seed)
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=args.output_dir)
    return cfg


def _out_dir(cfg: RunConfig, args) -> Path:
    # an --output-dir flag is relative to the working directory, a config value to the config file
    out = Path(args.output_dir) if args.output_dir is not None else cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _estimands_present(cfg_estimands, summaries_by: dict) -> list[str]:
    return [e for e in cfg_estimands if summaries_by.get(e)]


def write_run_artifacts(out: Path, res: MonteCarloResult, estimands, heading: str) -> list:
    write_dataset_csv(out / "source.csv", res.source.data)
    write_truths_csv(out / "truths.csv", res.truths)
    write_records_csv(out / "replicates.csv", res.records)
    return write_summaries(out, res.records, res.truths, estimands, heading)


def write_summaries(out: Path, records, truths, estimands, heading: str) -> list:
    summaries = []
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    for est in estimands:
        if truths.get(est) is None:
            continue
        cell = summarize(records, truths, est)
        if not cell:
            continue
        summaries.extend(cell)
        coverage_figure(cell, est, figs / f"coverage_{est}.svg")
        error_figure(records, truths, est, figs / f"error_{est}.svg")
    write_summary_csv(out / "summary.csv", summaries)
    used = list(dict.fromkeys(s.estimand for s in summaries))
    (out / "summary.md").write_text(markdown_report(summaries, used, heading), encoding="utf-8")
    return summaries


def _metadata(out: Path, command: str, started: float, extra: dict) -> None:
    meta = {"command": command, "version": __version__,
            "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "finished": datetime.now(timezone.utc).isoformat(),
            "elapsed_seconds": round(time.time() - started, 3), **extra}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def cmd_run(args) -> int:
    started = time.time()
    cfg = _apply_overrides(resolve_config(args.config), args)
    spec = cfg.scenario_spec()
    out = _out_dir(cfg, args)
    (out / "config.toml").write_text(serialize_config(cfg), encoding="utf-8")
    heading = f"Scenario {spec.scenario_id}, n = {cfg.n}, R = {cfg.replicates}"
    if cfg.n_sources == 1:
        res = run_monte_carlo(spec, cfg.n, cfg.frameworks, cfg.estimators, cfg.replicates,
                              cfg.master_seed, workers=args.workers, source=_source(cfg),
                              config=cfg.plasmode_config())
        summaries = write_run_artifacts(out, res, cfg.estimands, heading)
        if args.verbose:
            for est in dict.fromkeys(s.estimand for s in summaries):
                print(text_table(summaries, est) + "\n")
    else:
        lines = ["estimand,framework,estimator,median_bias_se,q25_bias_se,q75_bias_se,n_sources"]
        for est in cfg.estimands:
            study = multi_source_study(spec, cfg.n, cfg.frameworks, cfg.estimators,
                                       cfg.replicates, cfg.n_sources, cfg.master_seed, est,
                                       workers=args.workers, config=cfg.plasmode_config())
            for a in study.aggregates:
                lines.append(f"{est},{a.framework},{a.estimator_id},{a.median_bias_se!r},"
                             f"{a.q25_bias_se!r},{a.q75_bias_se!r},{a.n_sources}")
            for ps in study.per_source:
                sub = out / f"source_{ps.source_index:03d}"
                sub.mkdir(exist_ok=True)
                write_dataset_csv(sub / "source.csv", ps.source.data)
                write_truths_csv(sub / "truths.csv", ps.source.truths)
                write_summary_csv(sub / f"summary_{est}.csv", ps.summaries)
        (out / "cross_source.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _metadata(out, "run", started, {"workers": args.workers})
    print(f"wrote {out}")
    return 0


def oracle_text(result, n: int) -> str:
    lines = [f"n={n}"]
    for rep in result.reports():
        for key, value in rep.as_dict().items():
            lines.append(f"{rep.arm if rep.arm == 'ate' else 'arm' + rep.arm}.{key}={value!r}")
    return "\n".join(lines) + "\n"


def cmd_oracle(args) -> int:
    cfg = _apply_overrides(resolve_config(args.config), args)
    spec = cfg.scenario_spec()
    source = _source(cfg)
    result = source_oracle(spec, source)
    text = oracle_text(result, source.data.n)
    out = _out_dir(cfg, args)
    (out / "oracle.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_generate_source(args) -> int:
    cfg = _apply_overrides(resolve_config(args.config), args)
    out = _out_dir(cfg, args)
    for k in range(cfg.n_sources):
        source = _source(cfg, k)
        suffix = "" if cfg.n_sources == 1 else f"_{k:03d}"
        write_dataset_csv(out / f"source{suffix}.csv", source.data)
        write_truths_csv(out / f"truths{suffix}.csv", source.truths)
    print(f"wrote {out}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.replicates)
    records = read_records_csv(path)
    truths_path = Path(args.truths) if args.truths else path.with_name("truths.csv")
    truths = read_truths_csv(truths_path)
    out = Path(args.output_dir) if args.output_dir else path.parent
    out.mkdir(parents=True, exist_ok=True)
    estimands = [e for e in ("ate", "rr", "logcor", "ey1", "ey0")
                 if truths.get(e) is not None and any(r.get(e) is not None for r in records)]
    write_summaries(out, records, truths, estimands, f"Summary of {path.name}")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=int, default=1, help="worker processes (output is unaffected)")
    common.add_argument("--seed", type=int, default=None, help="override master_seed")
    common.add_argument("--output-dir", default=None, help="override output_dir")
    p = argparse.ArgumentParser(prog="plasmodesim",
                                description="Plasmode simulation: Sample vs Generate Treatment.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    cfg_help = f"config file (.toml) or built-in name ({BUILTIN_CONFIGS[0]}, ...)"
    r = sub.add_parser("run", parents=[common], help="run a Monte Carlo study")
    r.add_argument("config", help=cfg_help)
    r.add_argument("-v", "--verbose", action="store_true", help="print summary tables")
    r.set_defaults(func=cmd_run)
    o = sub.add_parser("oracle", parents=[common], help="closed-form B_n report for the source")
    o.add_argument("config", help=cfg_help)
    o.set_defaults(func=cmd_oracle)
    g = sub.add_parser("generate-source", parents=[common], help="write the source dataset(s)")
    g.add_argument("config", help=cfg_help)
    g.set_defaults(func=cmd_generate_source)
    rep = sub.add_parser("report", parents=[common], help="summarize a replicates.csv")
    rep.add_argument("replicates")
    rep.add_argument("--truths", default=None, help="truths.csv (default: next to replicates)")
    rep.set_defaults(func=cmd_report)
    sub.add_parser("list", help="list built-in configs").set_defaults(
        func=lambda a: print("\n".join(BUILTIN_CONFIGS)) or 0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CsvFormatError, DesignError, OracleError, FileNotFoundError, RuntimeError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
