"""Command-line front end.

Exit codes: 0 on success, 1 when fitting or numerical evaluation fails,
2 for invalid flags, configuration or unwritable outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import functionals as fn
from .core import Dataset
from .dgp import DgpSpec, oracle_nuisances, population_quantile_binning, sample_dataset
from .errors import ConfigError, FitError, NumericalError
from .estimators import EstimationPlan, EstimatorId, bootstrap_ci, build_scheme, estimate
from .montecarlo import (
    RATE_KINDS,
    StudyConfig,
    default_workers,
    rate_study,
    rates_csv,
    run_study,
    table1_csv,
    table1_report,
    write_study,
)
from .nuisance import MisspecConfig, fit_nuisances

log = logging.getLogger("coarsekit")


def _load_dgp(path) -> DgpSpec:
    if path is None:
        return DgpSpec()
    try:
        return DgpSpec.from_json(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read DGP file {path}: {exc.strerror}") from None


def _emit(text: str, out) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {out}: {exc.strerror}") from None


def _grid(text: str, cast):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad grid {text!r}") from None


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    data = sample_dataset(_load_dgp(args.dgp), args.n, args.seed)
    _emit(data.to_csv(), args.out)
    return 0


def cmd_estimate(args) -> int:
    ids = [EstimatorId.parse(e) for e in args.estimators.split(",") if e.strip()]
    if not ids:
        raise ConfigError("no estimators given")
    config = MisspecConfig.named(args.scenario) if args.scenario else MisspecConfig.from_flags(args.misspec or "")
    plan = EstimationPlan(
        K=args.K,
        binning=args.binning,
        config=config,
        bandwidth=args.kernel_b,
        m_k_method=args.m_k_method,
        plugin_ci=args.plugin_ci,
        crossfit=args.crossfit,
        crossfit_seed=args.seed,
    )
    try:
        data = Dataset.read_csv(args.data)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.data}: {exc.strerror}") from None
    if args.bootstrap:
        results = {eid: bootstrap_ci(eid, data, plan, B=args.bootstrap, seed=args.seed) for eid in ids}
    else:
        results = estimate(data, ids, plan)
    _emit("".join(res.to_json() + "\n" for res in results.values()), args.out)
    return 0


def cmd_study(args) -> int:
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {args.config}: {exc.strerror}") from None
    try:
        cfg = StudyConfig.from_json(text)
    except ConfigError as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    workers = args.workers if args.workers is not None else default_workers()
    if workers < 1:
        raise ConfigError("--workers must be positive")
    result = run_study(cfg, workers=workers)
    try:
        write_study(result, args.out)
    except OSError as exc:
        raise ConfigError(f"cannot write to {args.out}: {exc.strerror}") from None
    return 0


def cmd_table1(args) -> int:
    table = table1_report(seed=args.seed, n_mc=args.n_mc, spec=_load_dgp(args.dgp))
    _emit(table1_csv(table), args.out)
    return 0


def cmd_rates(args) -> int:
    cast = float if args.kind == "smoothing" else int
    grid = _grid(args.grid, cast) if args.grid else None
    if grid is None:
        grid = [0.5, 0.25, 0.125, 0.0625] if args.kind == "smoothing" else [2, 4, 8, 16, 32]
    result = rate_study(args.kind, grid, c=args.c, spec=_load_dgp(args.dgp), K=args.K, binning=args.binning)
    _emit(rates_csv(result), args.out)
    return 0


def cmd_diagnostics(args) -> int:
    spec = _load_dgp(args.dgp)
    if args.data:
        try:
            data = Dataset.read_csv(args.data)
        except OSError as exc:
            raise ConfigError(f"cannot read {args.data}: {exc.strerror}") from None
        scheme = build_scheme(data.m, args.K, args.binning)
        Q = fit_nuisances(data, scheme, components={"mu", "m_k", "g_k", "f_mac"})
        c_values = np.unique(data.c)
    else:
        scheme = population_quantile_binning(spec, args.K)
        Q = oracle_nuisances(spec, scheme)
        c_values = spec.c_levels
    _emit(fn.diagnostics_csv(fn.coarsening_diagnostics(Q, scheme, c_values)), args.out)
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coarsekit", description="Coarsened mediation functionals: simulation, estimation, studies.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a dataset from the simulation design")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    p.add_argument("--dgp", default=None, help="JSON file overriding the design")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="run estimators on a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--estimators", required=True, help="comma-separated estimator ids")
    p.add_argument("--K", type=int, default=6)
    p.add_argument("--binning", default="equal_frequency", choices=["equal_frequency", "equal_width"])
    p.add_argument("--kernel-b", type=float, default=None, dest="kernel_b")
    p.add_argument("--bootstrap", type=int, default=0, metavar="B")
    p.add_argument("--misspec", default=None, help="comma list of misspecified nuisances (m_k,mu,mu_k,g,g_k,pi)")
    p.add_argument("--scenario", default=None, choices=["correct", "condition1", "condition2", "condition3", "false"])
    p.add_argument("--m-k-method", default="model", choices=["model", "empirical"], dest="m_k_method")
    p.add_argument("--plugin-ci", default="none", choices=["none", "influence_function"], dest="plugin_ci")
    p.add_argument("--crossfit", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("study", help="Monte Carlo replication study from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=None, help="process count (default: $COARSEKIT_WORKERS or 1)")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("table1", help="coarsening error for K in {2, 6} at every covariate level")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n-mc", type=_positive_int, default=10**6, dest="n_mc")
    p.add_argument("--dgp", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_table1)

    p = sub.add_parser("rates", help="oracle log-log rate fit")
    p.add_argument("--kind", required=True, choices=list(RATE_KINDS))
    p.add_argument("--grid", default=None, help="comma-separated K (or b) values")
    p.add_argument("--c", type=float, default=0.0)
    p.add_argument("--K", type=int, default=6, help="bins for the smoothing study")
    p.add_argument("--binning", default="equal_frequency", choices=["equal_frequency", "equal_width"])
    p.add_argument("--dgp", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_rates)

    p = sub.add_parser("diagnostics", help="per-(c, k) within-bin shifts, bin probabilities and covariances")
    p.add_argument("--K", type=int, default=6)
    p.add_argument("--data", default=None, help="fit nuisances from this CSV instead of using the oracle")
    p.add_argument("--binning", default="equal_frequency", choices=["equal_frequency", "equal_width"])
    p.add_argument("--dgp", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_diagnostics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"coarsekit: error: {exc}", file=sys.stderr)
        return 2
    except (FitError, NumericalError) as exc:
        print(f"coarsekit: fit error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
