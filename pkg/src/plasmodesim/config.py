"""Run configuration files (TOML) and the built-in configurations.

See README.md for the full grammar. A config is a set of top-level keys plus
either ``scenario = "<builtin id>"`` or an inline ``[scenario]`` table.
"""
from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .datamodel import BINARY, FRAMEWORKS, IDENTITY, LOGIT, ModelSpec, load_covariates_csv
from .design import DesignError
from .dgm import (BUILTIN_SCENARIOS, BootstrapCovariates, Bernoulli, Normal, ScenarioSpec,
                  SumWithNoise, ThresholdIndicator, randomized)
from .estimators import ESTIMATORS, MSM, STANDARD_ESTIMATORS
from .plasmode import FITTED_ON_SOURCE, MODEL_SOURCES, TRUE_MODEL, PlasmodeConfig

ESTIMANDS = ("ate", "rr", "logcor", "ey1", "ey0")
MAX_SEED = 2 ** 64 - 1


class ConfigError(ValueError):
    """A config problem; ``field`` names the offending key, ``line`` its location (1-based)."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.message = message
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class RunConfig:
    scenario: str | dict
    n: int
    replicates: int
    frameworks: tuple[str, ...] = FRAMEWORKS
    estimators: tuple[str, ...] = ()
    estimands: tuple[str, ...] = ("ate",)
    master_seed: int = 0
    n_sources: int = 1
    output_dir: str = "plasmode-out"
    ps_for_generation: str = FITTED_ON_SOURCE
    outcome_for_generation: str = TRUE_MODEL
    source_csv: str | None = None
    base_dir: str = field(default=".", compare=False)

    def scenario_spec(self) -> ScenarioSpec:
        if isinstance(self.scenario, str):
            return BUILTIN_SCENARIOS[self.scenario]
        return build_inline_scenario(self.scenario, Path(self.base_dir))

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def plasmode_config(self) -> PlasmodeConfig:
        return PlasmodeConfig(ps_for_generation=self.ps_for_generation,
                              outcome_for_generation=self.outcome_for_generation)


# --- locating fields in the source text ---------------------------------

def _locate(text: str | None, key: str, section: str | None = None) -> int | None:
    """Best-effort 1-based line of ``key = ...`` (inside ``[section]`` when given)."""
    if not text:
        return None
    leaf = key.split(".")[-1]
    pat = re.compile(rf'^\s*("{re.escape(leaf)}"|{re.escape(leaf)})\s*=')
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        head = re.match(r"^\s*\[\[?\s*([^\]]+?)\s*\]\]?", line)
        if head:
            current = head.group(1)
            continue
        if pat.match(line) and (section is None or (current or "").startswith(section)):
            return i
    return None


class _Ctx:
    def __init__(self, text: str | None):
        self.text = text

    def fail(self, message: str, key: str, section: str | None = None):
        raise ConfigError(message, key, _locate(self.text, key, section))


def _int(ctx: _Ctx, raw: dict, key: str, default=None, lo: int = 1, hi: int | None = None,
         section=None) -> int:
    if key not in raw:
        if default is None:
            ctx.fail("required key is missing", key, section)
        return default
    v = raw[key]
    if isinstance(v, bool) or not isinstance(v, int):
        ctx.fail(f"expected an integer, got {v!r}", key, section)
    if v < lo or (hi is not None and v > hi):
        ctx.fail(f"value {v} out of range", key, section)
    return v


def _num(ctx: _Ctx, raw: dict, key: str, section: str, default=None) -> float:
    if key not in raw:
        if default is None:
            ctx.fail("required key is missing", key, section)
        return default
    v = raw[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        ctx.fail(f"expected a finite number, got {v!r}", key, section)
    return float(v)


def _str_list(ctx: _Ctx, raw: dict, key: str, allowed, default) -> tuple[str, ...]:
    if key not in raw:
        return tuple(default)
    v = raw[key]
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v) or not v:
        ctx.fail("expected a non-empty list of strings", key)
    bad = [x for x in v if x not in allowed]
    if bad:
        ctx.fail(f"unknown value(s) {', '.join(bad)}; allowed: {', '.join(allowed)}", key)
    if len(set(v)) != len(v):
        ctx.fail("duplicate entries", key)
    return tuple(v)


# --- inline scenarios ---------------------------------------------------

_COVARIATE_KINDS = {
    "normal": ("mean", "sd"),
    "bernoulli": ("p",),
    "sum_with_noise": ("base", "sd"),
    "threshold": ("base", "cutoff"),
    "bootstrap": ("file", "columns"),
}


def _canonical_model(ctx: _Ctx, raw: Any, section: str, ps: bool) -> dict:
    if not isinstance(raw, dict):
        ctx.fail("expected a table", section.split(".")[-1])
    if ps and "randomized" in raw:
        extra = set(raw) - {"randomized"}
        if extra:
            ctx.fail("randomized excludes other keys", sorted(extra)[0], section)
        p = _num(ctx, raw, "randomized", section)
        if not 0 < p < 1:
            ctx.fail("randomized(p) requires 0 < p < 1", "randomized", section)
        return {"randomized": p}
    allowed = {"intercept", "coefficients"} | (set() if ps else {"link", "noise_sd"})
    extra = set(raw) - allowed
    if extra:
        ctx.fail("unknown key", sorted(extra)[0], section)
    out: dict = {"intercept": _num(ctx, raw, "intercept", section)}
    if not ps:
        link = raw.get("link", IDENTITY)
        if link not in (IDENTITY, LOGIT):
            ctx.fail(f"link must be {IDENTITY!r} or {LOGIT!r}", "link", section)
        out["link"] = link
        if link == IDENTITY:
            out["noise_sd"] = _num(ctx, raw, "noise_sd", section)
            if out["noise_sd"] < 0:
                ctx.fail("noise_sd must be non-negative", "noise_sd", section)
        elif "noise_sd" in raw:
            ctx.fail("noise_sd only applies to the identity link", "noise_sd", section)
    coefs = raw.get("coefficients", {})
    if not isinstance(coefs, dict):
        ctx.fail("expected a table of term = coefficient", "coefficients", section)
    out["coefficients"] = {str(k): _num(ctx, coefs, k, section + ".coefficients") for k in coefs}
    return out


def _canonical_covariate(ctx: _Ctx, raw: Any) -> dict:
    sec = "scenario.covariates"
    if not isinstance(raw, dict):
        ctx.fail("expected a table", "covariates")
    kind = raw.get("kind")
    if kind not in _COVARIATE_KINDS:
        ctx.fail(f"kind must be one of {', '.join(_COVARIATE_KINDS)}", "kind", sec)
    keys = _COVARIATE_KINDS[kind]
    allowed = {"kind", *keys} | ({"name"} if kind != "bootstrap" else set())
    extra = set(raw) - allowed
    if extra:
        ctx.fail("unknown key", sorted(extra)[0], sec)
    out: dict = {"kind": kind}
    if kind == "bootstrap":
        if not isinstance(raw.get("file"), str):
            ctx.fail("bootstrap covariates need a file path", "file", sec)
        out["file"] = raw["file"]
        cols = raw.get("columns")
        if cols is not None:
            if not isinstance(cols, list) or not all(isinstance(c, str) for c in cols):
                ctx.fail("expected a list of column names", "columns", sec)
            out["columns"] = list(cols)
        return out
    if not isinstance(raw.get("name"), str):
        ctx.fail("covariate needs a name", "name", sec)
    out["name"] = raw["name"]
    for key in keys:
        if key == "base":
            if not isinstance(raw.get("base"), str):
                ctx.fail("expected a covariate name", "base", sec)
            out["base"] = raw["base"]
        elif key == "sd" and key not in raw:
            out["sd"] = 1.0
        elif key == "mean" and key not in raw:
            out["mean"] = 0.0
        else:
            out[key] = _num(ctx, raw, key, sec)
    return out


def _canonical_scenario(ctx: _Ctx, raw: dict) -> dict:
    allowed = {"id", "covariates", "ps_model", "outcome_model", "msm_design"}
    extra = set(raw) - allowed
    if extra:
        ctx.fail("unknown key", sorted(extra)[0], "scenario")
    covs = raw.get("covariates")
    if not isinstance(covs, list) or not covs:
        ctx.fail("an inline scenario needs at least one [[scenario.covariates]] entry",
                 "covariates", "scenario")
    out = {"id": str(raw.get("id", "custom")),
           "covariates": [_canonical_covariate(ctx, c) for c in covs]}
    if "ps_model" not in raw:
        ctx.fail("required table is missing", "ps_model", "scenario")
    if "outcome_model" not in raw:
        ctx.fail("required table is missing", "outcome_model", "scenario")
    out["ps_model"] = _canonical_model(ctx, raw["ps_model"], "scenario.ps_model", ps=True)
    out["outcome_model"] = _canonical_model(ctx, raw["outcome_model"], "scenario.outcome_model",
                                            ps=False)
    if "msm_design" in raw:
        md = raw["msm_design"]
        if not isinstance(md, list) or not all(isinstance(t, str) for t in md):
            ctx.fail("expected a list of design terms", "msm_design", "scenario")
        out["msm_design"] = list(md)
    return out


def _model(d: dict, link: str | None = None) -> ModelSpec:
    if "randomized" in d:
        return randomized(d["randomized"])
    lk = link or d["link"]
    return ModelSpec.from_mapping(d["intercept"], d["coefficients"], lk,
                                  d.get("noise_sd") if lk == IDENTITY else None)


def build_inline_scenario(table: dict, base_dir: Path = Path(".")) -> ScenarioSpec:
    """Turn a canonical ``[scenario]`` table into a :class:`ScenarioSpec`."""
    gens = []
    for c in table["covariates"]:
        kind = c["kind"]
        if kind == "normal":
            gens.append(Normal(c["name"], c["mean"], c["sd"]))
        elif kind == "bernoulli":
            gens.append(Bernoulli(c["name"], c["p"]))
        elif kind == "sum_with_noise":
            gens.append(SumWithNoise(c["name"], c["base"], c["sd"]))
        elif kind == "threshold":
            gens.append(ThresholdIndicator(c["name"], c["base"], c["cutoff"]))
        else:
            path = Path(c["file"])
            path = path if path.is_absolute() else base_dir / path
            matrix, names = load_covariates_csv(path, c.get("columns"))
            gens.append(BootstrapCovariates(matrix, names))
    return ScenarioSpec(table["id"], tuple(gens), _model(table["ps_model"], LOGIT),
                        _model(table["outcome_model"]), table.get("msm_design"))


# --- parse / serialize --------------------------------------------------

_TOP_KEYS = ("scenario", "n", "replicates", "frameworks", "estimators", "estimands", "master_seed",
             "n_sources", "output_dir", "ps_for_generation", "outcome_for_generation",
             "source_csv")


def config_from_mapping(raw: dict, text: str | None = None, base_dir: str | Path = ".") -> RunConfig:
    ctx = _Ctx(text)
    extra = [k for k in raw if k not in _TOP_KEYS]
    if extra:
        ctx.fail("unknown key", extra[0])
    if "scenario" not in raw:
        raise ConfigError("required key is missing (builtin id or [scenario] table)", "scenario")
    sc = raw["scenario"]
    if isinstance(sc, str):
        if sc not in BUILTIN_SCENARIOS:
            ctx.fail(f"unknown scenario {sc!r}; built-ins: {', '.join(BUILTIN_SCENARIOS)}",
                     "scenario")
        scenario: str | dict = sc
    elif isinstance(sc, dict):
        scenario = _canonical_scenario(ctx, sc)
    else:
        ctx.fail("expected a builtin id or a [scenario] table", "scenario")
    n = _int(ctx, raw, "n")
    R = _int(ctx, raw, "replicates")
    frameworks = _str_list(ctx, raw, "frameworks", FRAMEWORKS, FRAMEWORKS)
    estimators = _str_list(ctx, raw, "estimators", tuple(ESTIMATORS), ())
    estimands = _str_list(ctx, raw, "estimands", ESTIMANDS, ("ate",))
    seed = _int(ctx, raw, "master_seed", 0, lo=0, hi=MAX_SEED)
    n_sources = _int(ctx, raw, "n_sources", 1)
    out_dir = raw.get("output_dir", "plasmode-out")
    if not isinstance(out_dir, str) or not out_dir:
        ctx.fail("expected a path string", "output_dir")
    ps_gen = raw.get("ps_for_generation", FITTED_ON_SOURCE)
    y_gen = raw.get("outcome_for_generation", TRUE_MODEL)
    for key, val in (("ps_for_generation", ps_gen), ("outcome_for_generation", y_gen)):
        if val not in MODEL_SOURCES:
            ctx.fail(f"must be one of {', '.join(MODEL_SOURCES)}", key)
    source_csv = raw.get("source_csv")
    if source_csv is not None and not isinstance(source_csv, str):
        ctx.fail("expected a path string", "source_csv")
    if source_csv is not None and n_sources > 1:
        ctx.fail("source_csv fixes the source; n_sources must be 1", "n_sources")
    try:
        spec = (BUILTIN_SCENARIOS[scenario] if isinstance(scenario, str)
                else build_inline_scenario(scenario, Path(base_dir)))
    except (DesignError, ValueError, FileNotFoundError) as exc:
        raise ConfigError(str(exc), "scenario", _locate(text, "scenario")) from None
    if not estimators:
        estimators = tuple(e for e in STANDARD_ESTIMATORS if e != MSM or spec.msm_design)
    binary = spec.outcome_kind == BINARY
    for e in estimands:
        if e in ("rr", "logcor") and not binary:
            ctx.fail(f"estimand {e!r} needs a binary outcome; scenario {spec.scenario_id} "
                     "has a continuous outcome", "estimands")
        if e == "logcor" and spec.msm_design is None:
            ctx.fail("estimand 'logcor' needs a scenario with msm_design", "estimands")
    if MSM in estimators and (spec.msm_design is None or not binary):
        ctx.fail("estimator 'msm' needs a binary-outcome scenario with msm_design", "estimators")
    return RunConfig(scenario, n, R, frameworks, estimators, estimands, seed, n_sources, out_dir,
                     ps_gen, y_gen, source_csv, str(base_dir))


def parse_config(text: str, base_dir: str | Path = ".") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"syntax error: {exc}", None, int(m.group(1)) if m else None) from None
    return config_from_mapping(raw, text, base_dir)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such config file: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def config_to_mapping(cfg: RunConfig) -> dict:
    out: dict = {}
    if isinstance(cfg.scenario, str):
        out["scenario"] = cfg.scenario
    out.update(n=cfg.n, replicates=cfg.replicates, frameworks=list(cfg.frameworks),
               estimators=list(cfg.estimators), estimands=list(cfg.estimands),
               master_seed=cfg.master_seed, n_sources=cfg.n_sources, output_dir=cfg.output_dir,
               ps_for_generation=cfg.ps_for_generation,
               outcome_for_generation=cfg.outcome_for_generation)
    if cfg.source_csv is not None:
        out["source_csv"] = cfg.source_csv
    if isinstance(cfg.scenario, dict):
        out["scenario"] = cfg.scenario
    return out


def serialize_config(cfg: RunConfig) -> str:
    """Canonical TOML text; ``parse_config(serialize_config(c)) == c``."""
    return tomli_w.dumps(config_to_mapping(cfg))


# --- built-ins ----------------------------------------------------------

def _desk_replicates(scenario: str, n: int) -> int:
    if n <= 1000:
        return 5000
    return 1000 if scenario.startswith("S4") else 2000


_ESTIMANDS_BY_SCENARIO = {"S1": ("ate", "ey1", "ey0"), "S1a": ("ate", "ey1", "ey0"),
                          "S2": ("ate", "rr"), "S2a": ("ate", "rr"), "S3": ("ate", "rr"),
                          "S4a": ("logcor", "ey1", "ey0"), "S4b": ("logcor", "ey1", "ey0")}
_SIZES = {"S1": (100, 1000, 10000), "S2": (100, 1000, 10000), "S1a": (1000,), "S2a": (1000,),
          "S3": (10000,), "S4a": (100, 1000, 10000), "S4b": (100, 1000, 10000)}
DEFAULT_SEED = 20240101


def builtin_config(name: str) -> RunConfig:
    """Configs named ``<scenario>_n<size>``, e.g. ``s1_n1000`` or ``s4b_n10000``."""
    m = re.fullmatch(r"(s\d+[ab]?)_n(\d+)", name.lower())
    sid = None
    if m:
        sid = next((s for s in BUILTIN_SCENARIOS if s.lower() == m.group(1)), None)
    if sid is None or int(m.group(2)) not in _SIZES[sid]:
        raise KeyError(f"unknown built-in config {name!r}; available: {', '.join(BUILTIN_CONFIGS)}")
    n = int(m.group(2))
    spec = BUILTIN_SCENARIOS[sid]
    estimators = tuple(e for e in STANDARD_ESTIMATORS if e != MSM or spec.msm_design)
    return RunConfig(sid, n, _desk_replicates(sid, n), FRAMEWORKS, estimators,
                     _ESTIMANDS_BY_SCENARIO[sid], DEFAULT_SEED, 1, f"out/{name.lower()}")


BUILTIN_CONFIGS = tuple(f"{s.lower()}_n{n}" for s, sizes in _SIZES.items() for n in sizes)


def resolve_config(ref: str) -> RunConfig:
    """A config file path, or the name of a built-in config."""
    path = Path(ref)
    if path.suffix == ".toml" or path.exists():
        return load_config(path)
    try:
        return builtin_config(ref)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
