"""Replication studies, oracle rate studies and the coarsening-error table."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import jsonschema
import numpy as np
from scipy.optimize import brentq

from . import functionals as fn
from .core import KernelSpec, make_equal_width_binning, make_quantile_binning
from .dgp import (
    DgpSpec,
    oracle_nuisances,
    population_quantile_binning,
    sample_dataset,
    true_delta_h,
    true_delta_tilde_h,
    true_gamma,
    true_psi,
)
from .errors import ConfigError
from .estimators import NEEDS_KERNEL, EstimationPlan, EstimatorId, estimate
from .nuisance import MisspecConfig

# --------------------------------------------------------------------------
# Study configuration
# --------------------------------------------------------------------------

STUDY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n_values": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
        "reps": {"type": "integer", "minimum": 2},
        "K_values": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
        "b_values": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "estimators": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "configs": {
            "type": "array",
            "minItems": 1,
            "items": {"oneOf": [{"type": "string"}, {"type": "object"}]},
        },
        "seed": {"type": "integer", "minimum": 0},
        "binning": {"enum": ["equal_frequency", "equal_width"]},
        "m_k_method": {"enum": ["model", "empirical"]},
        "plugin_ci": {"enum": ["none", "influence_function"]},
        "dgp": {"type": "object"},
    },
}


def _parse_config(item) -> MisspecConfig:
    if isinstance(item, MisspecConfig):
        return item
    if isinstance(item, str):
        if item in ("correct", "condition1", "condition2", "condition3", "false"):
            return MisspecConfig.named(item)
        return MisspecConfig.from_flags(item)
    return MisspecConfig.from_dict(item)


@dataclass(frozen=True)
class StudyConfig:
    """Grid and seed of a replication study."""

    n_values: tuple = (500, 5000, 50000)
    reps: int = 1000
    K_values: tuple = (2, 4, 6, 8)
    b_values: tuple = ()
    estimators: tuple = ("psi_h_plugin", "psi_tilde_h_plugin")
    configs: tuple = (MisspecConfig(),)
    seed: int = 0
    binning: str = "equal_frequency"
    m_k_method: str = "model"
    plugin_ci: str = "influence_function"
    dgp: DgpSpec = field(default_factory=DgpSpec)

    def __post_init__(self):
        if self.reps < 2:
            raise ConfigError("reps must be at least 2")
        if any(K < 2 for K in self.K_values):
            raise ConfigError("every K must be at least 2")
        if any(n < 2 for n in self.n_values):
            raise ConfigError("every n must be at least 2")
        ids = tuple(EstimatorId.parse(e).value for e in self.estimators)
        if any(EstimatorId(e) in NEEDS_KERNEL for e in ids) and not self.b_values:
            raise ConfigError("smoothed estimators need at least one bandwidth in b_values")
        object.__setattr__(self, "estimators", ids)
        object.__setattr__(self, "configs", tuple(_parse_config(c) for c in self.configs))
        for name in ("n_values", "K_values", "b_values"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        try:
            jsonschema.validate(d, STUDY_SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/" + "/".join(str(p) for p in exc.absolute_path)
            raise ConfigError(f"invalid study config at {path}: {exc.message}") from None
        d = dict(d)
        if "dgp" in d:
            d["dgp"] = DgpSpec.from_json(json.dumps(d["dgp"]))
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "StudyConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed study config JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "n_values": list(self.n_values),
            "reps": self.reps,
            "K_values": list(self.K_values),
            "b_values": list(self.b_values),
            "estimators": list(self.estimators),
            "configs": [c.to_dict() for c in self.configs],
            "seed": self.seed,
            "binning": self.binning,
            "m_k_method": self.m_k_method,
            "plugin_ci": self.plugin_ci,
            "dgp": json.loads(self.dgp.to_json()),
        }


# --------------------------------------------------------------------------
# Replications
# --------------------------------------------------------------------------

REPLICATION_FIELDS = ("n", "rep", "K", "b", "config", "estimator", "point", "se", "ci_lo", "ci_hi", "clip_count", "error")


def replication_seed(master: int, cell: int, rep: int) -> np.random.SeedSequence:
    """Independent stream for replication ``rep`` of cell ``cell``."""
    return np.random.SeedSequence(master, spawn_key=(cell, rep))


def _run_replication(task) -> list[dict]:
    cfg, n_index, rep = task
    n = cfg.n_values[n_index]
    data = sample_dataset(cfg.dgp, n, replication_seed(cfg.seed, n_index, rep))
    smooth = [e for e in cfg.estimators if EstimatorId(e) in NEEDS_KERNEL]
    plain = [e for e in cfg.estimators if EstimatorId(e) not in NEEDS_KERNEL]
    records = []
    for K in cfg.K_values:
        for config in cfg.configs:
            runs = [(None, plain)] if plain else []
            runs += [(b, smooth) for b in cfg.b_values] if smooth else []
            for b, ids in runs:
                plan = EstimationPlan(
                    K=K,
                    binning=cfg.binning,
                    config=config,
                    bandwidth=b,
                    m_k_method=cfg.m_k_method,
                    plugin_ci=cfg.plugin_ci,
                )
                try:
                    results = estimate(data, ids, plan, errors="record")
                except Exception as exc:  # binning failure takes down the whole cell
                    results = {EstimatorId(e): exc for e in ids}
                for eid, res in results.items():
                    row = dict(n=n, rep=rep, K=K, b=b, config=config.name, estimator=eid.value)
                    if isinstance(res, Exception):
                        row.update(point=None, se=None, ci_lo=None, ci_hi=None, clip_count=0, error=f"{type(res).__name__}: {res}")
                    else:
                        row.update(point=res.point, se=res.se, ci_lo=res.ci_lo, ci_hi=res.ci_hi, clip_count=res.clip_count, error="")
                    records.append(row)
    return records


def _tasks(cfg: StudyConfig):
    return [(cfg, i, rep) for i in range(len(cfg.n_values)) for rep in range(cfg.reps)]


@dataclass
class StudyResult:
    config: StudyConfig
    records: list[dict]
    summary: list[dict]
    truths: dict


def run_study(cfg: StudyConfig, workers: int = 1, on_records: Callable[[list[dict]], None] | None = None) -> StudyResult:
    """Run every replication and summarize.

    Output depends only on ``cfg``: tasks are mapped in a fixed order and each
    replication draws from its own seed stream, so ``workers`` only changes
    wall time. ``on_records`` receives each replication's rows as they arrive.
    """
    tasks = _tasks(cfg)
    records: list[dict] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            stream = pool.map(_run_replication, tasks, chunksize=max(1, len(tasks) // (8 * workers)))
            for rows in stream:
                records.extend(rows)
                if on_records:
                    on_records(rows)
    else:
        for task in tasks:
            rows = _run_replication(task)
            records.extend(rows)
            if on_records:
                on_records(rows)
    truths = {"psi": true_psi(cfg.dgp), "gamma": true_gamma(cfg.dgp)}
    return StudyResult(cfg, records, summarize(records, truths), truths)


def target_for(estimator: str, truths: dict) -> float:
    return truths["gamma"] if estimator.startswith("gamma") else truths["psi"]


SUMMARY_METRICS = (
    "bias",
    "variance",
    "mse",
    "coverage",
    "mean_ci_width",
    "failure_count",
    "n_ok",
    "bias_mc_se",
    "coverage_mc_se",
    "failure_rate_exceeded",
)


def summarize(records: Iterable[dict], truths: dict) -> list[dict]:
    """Per-cell bias, population variance, MSE, coverage and interval width."""
    cells: dict = {}
    for r in records:
        key = (r["estimator"], r["n"], r["K"], r["b"], r["config"])
        cells.setdefault(key, []).append(r)
    out = []
    for key, rows in cells.items():
        estimator = key[0]
        truth = target_for(estimator, truths)
        ok = [r for r in rows if not r["error"]]
        points = np.array([r["point"] for r in ok], dtype=float)
        failures = len(rows) - len(ok)
        cell = dict(zip(("estimator", "n", "K", "b", "config"), key))
        cell["truth"] = truth
        if len(ok):
            mean = float(points.mean())
            bias = mean - truth
            variance = float(np.mean((points - mean) ** 2))
            mse = float(np.mean((points - truth) ** 2))
            with_ci = [r for r in ok if r["ci_lo"] is not None]
            if with_ci:
                covered = np.array([r["ci_lo"] <= truth <= r["ci_hi"] for r in with_ci], dtype=float)
                coverage = float(covered.mean())
                width = float(np.mean([r["ci_hi"] - r["ci_lo"] for r in with_ci]))
                cov_se = math.sqrt(coverage * (1 - coverage) / len(with_ci))
            else:
                coverage = width = cov_se = float("nan")
            bias_se = math.sqrt(variance / len(ok))
        else:
            bias = variance = mse = coverage = width = bias_se = cov_se = float("nan")
        cell.update(
            bias=bias,
            variance=variance,
            mse=mse,
            coverage=coverage,
            mean_ci_width=width,
            failure_count=failures,
            n_ok=len(ok),
            bias_mc_se=bias_se,
            coverage_mc_se=cov_se,
            failure_rate_exceeded=failures > 0.1 * len(rows),
        )
        out.append(cell)
    return out


def summary_lookup(summary: list[dict], estimator: str, n: int, K: int, config: str = "correct", b=None) -> dict:
    for cell in summary:
        if (cell["estimator"], cell["n"], cell["K"], cell["config"], cell["b"]) == (estimator, n, K, config, b):
            return cell
    raise KeyError((estimator, n, K, config, b))


# --------------------------------------------------------------------------
# Oracle rate studies
# --------------------------------------------------------------------------

RATE_KINDS = ("delta_h", "delta_tilde_h", "smoothing")


@dataclass(frozen=True)
class RateResult:
    kind: str
    grid: tuple
    errors: tuple
    slope: float
    intercept: float
    excluded: tuple
    c: float


def _rate_scheme(spec: DgpSpec, K: int, binning: str):
    if binning == "equal_frequency":
        return population_quantile_binning(spec, K)
    if binning == "equal_width":
        # equal widths over the central 99.8% of the marginal law of M
        lo, hi = spec.default_support()
        q = [brentq(lambda x, p=p: float(spec.mixture_cdf(x)) - p, lo, hi, xtol=1e-12) for p in (0.001, 0.999)]
        inner = make_equal_width_binning(K, (q[0], q[1]))
        return type(inner)(inner.cuts, spec.default_support())
    raise ConfigError(f"unknown binning {binning!r}")


def rate_study(
    kind: str,
    grid,
    c: float = 0.0,
    spec: DgpSpec | None = None,
    K: int = 6,
    binning: str = "equal_frequency",
) -> RateResult:
    """Log-log slope of an oracle error against ``K`` (or against ``b`` for smoothing).

    Errors below 1e-12 are left out of the fit and listed in ``excluded``.
    """
    spec = spec or DgpSpec()
    grid = tuple(grid)
    if kind not in RATE_KINDS:
        raise ConfigError(f"unknown rate kind {kind!r}; choose from {RATE_KINDS}")
    if len(grid) < 4:
        raise ConfigError("a rate grid needs at least 4 points")
    errors = []
    if kind == "smoothing":
        scheme = _rate_scheme(spec, K, binning)
        Q = oracle_nuisances(spec, scheme)
        base = float(fn.theta_tilde_h(Q, scheme, c))
        for b in grid:
            errors.append(abs(float(fn.theta_tilde_hb(Q, KernelSpec(float(b)), scheme, c)) - base))
    else:
        oracle = true_delta_h if kind == "delta_h" else true_delta_tilde_h
        for k in grid:
            if int(k) != k or k < 2:
                raise ConfigError("K grid values must be integers >= 2")
            errors.append(abs(float(oracle(spec, _rate_scheme(spec, int(k), binning), c))))
    x = np.log(np.asarray(grid, dtype=float))
    e = np.asarray(errors)
    keep = e >= 1e-12
    if keep.sum() < 2:
        raise ConfigError("fewer than two usable grid points for the rate fit")
    slope, intercept = np.polyfit(x[keep], np.log(e[keep]), 1)
    excluded = tuple(g for g, k in zip(grid, keep) if not k)
    return RateResult(kind, grid, tuple(errors), float(slope), float(intercept), excluded, float(c))


# --------------------------------------------------------------------------
# Coarsening-error table
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Table1:
    K_values: tuple
    c_values: tuple
    values: np.ndarray  # (len(K_values), len(c_values))
    cuts: dict


def table1_report(seed: int = 1, n_mc: int = 10**6, spec: DgpSpec | None = None, K_values=(2, 6)) -> Table1:
    """Coarsening error at equal-frequency cuts taken from a pooled sample of ``M``."""
    spec = spec or DgpSpec()
    data = sample_dataset(spec, n_mc, seed)
    c = spec.c_levels
    rows, cuts = [], {}
    for K in K_values:
        scheme = make_quantile_binning(data.m, K)
        cuts[K] = scheme.cuts.tolist()
        rows.append(true_delta_h(spec, scheme, c))
    return Table1(tuple(K_values), tuple(c.tolist()), np.array(rows), cuts)


# --------------------------------------------------------------------------
# Writers
# --------------------------------------------------------------------------


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(header, rows, path=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def summary_csv(summary: list[dict], path=None) -> str:
    """Long format: one row per (cell, metric)."""
    rows = []
    for cell in summary:
        for metric in SUMMARY_METRICS:
            rows.append([cell["estimator"], cell["n"], cell["K"], cell["b"], cell["config"], metric, cell[metric]])
    return _write_csv(("estimator", "n", "K", "b", "config", "metric", "value"), rows, path)


def replications_csv(records: list[dict], path=None) -> str:
    return _write_csv(REPLICATION_FIELDS, ([r[f] for f in REPLICATION_FIELDS] for r in records), path)


def table1_csv(table: Table1, path=None) -> str:
    rows = [[K] + list(table.values[i]) for i, K in enumerate(table.K_values)]
    return _write_csv(["K"] + [f"c={c:g}" for c in table.c_values], rows, path)


def rates_csv(result: RateResult, path=None) -> str:
    axis = "b" if result.kind == "smoothing" else "K"
    rows = [[result.kind, result.c, axis, g, e, g in result.excluded] for g, e in zip(result.grid, result.errors)]
    rows.append([result.kind, result.c, "slope", "", result.slope, False])
    return _write_csv(("kind", "c", "axis", "value", "error", "excluded"), rows, path)


def write_study(result: StudyResult, out_dir, table=None, rates=None) -> list[Path]:
    """Write summary, replications, table1, rates and manifest files into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    table = table or table1_report(seed=cfg.seed, spec=cfg.dgp)
    rates = rates or [rate_study(kind, (2, 4, 8, 16, 32) if kind != "smoothing" else (0.5, 0.25, 0.125, 0.0625), spec=cfg.dgp) for kind in RATE_KINDS]
    paths = [out / "summary.csv", out / "replications.csv", out / "table1.csv", out / "rates.csv", out / "manifest.json"]
    summary_csv(result.summary, paths[0])
    replications_csv(result.records, paths[1])
    table1_csv(table, paths[2])
    rate_text = "".join(rates_csv(r).split("\n", 1)[1] if i else rates_csv(r) for i, r in enumerate(rates))
    paths[3].write_text(rate_text)
    manifest = {
        "config": cfg.to_dict(),
        "truths": result.truths,
        "seeds": {
            "master": cfg.seed,
            "replication_stream": "SeedSequence(master, spawn_key=(n_index, rep))",
            "table1_seed": cfg.seed,
        },
        "files": [p.name for p in paths],
    }
    paths[4].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def default_workers() -> int:
    env = os.environ.get("COARSEKIT_WORKERS")
    if env is None:
        return 1
    try:
        value = int(env)
    except ValueError:
        raise ConfigError(f"COARSEKIT_WORKERS must be an integer, got {env!r}") from None
    if value < 1:
        raise ConfigError("COARSEKIT_WORKERS must be positive")
    return value


__all__ = [
    "StudyConfig",
    "StudyResult",
    "RateResult",
    "Table1",
    "run_study",
    "summarize",
    "summary_lookup",
    "rate_study",
    "table1_report",
    "summary_csv",
    "replications_csv",
    "table1_csv",
    "rates_csv",
    "write_study",
    "default_workers",
    "replication_seed",
]
