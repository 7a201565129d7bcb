"""Command line: ``regmkt {simulate,grid,sweep,stylized}``.

Exit codes: 0 success, 2 configuration error, 3 clearing failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, experiments, metrics
from .config import SimulationConfig, load_config, validate
from .engine import RunConfig, run
from .model import ConfigError, RegulatoryRegime
from .output import write_csv, write_json
from .stochastic import SYNTHETIC, RngState

log = logging.getLogger("regmkt")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

GRID_COLUMNS = ["run_index", "seed", "ssban", "var", "tt", "tax_level", "liquidity",
                "volatility", "volatility_pct", "kurtosis_flipped", "defaults", "aborted"]
REGRESSION_COLUMNS = ["model", "response", "term", "estimate", "se", "t", "p", "stars"]
SWEEP_COLUMNS = ["regime", "ssban", "var", "tax_level", "metric", "mean", "median", "q75",
                 "frac_kurtosis_gt_100", "n_runs", "n_aborted"]
RESPONSES = ["liquidity", "volatility_pct", "kurtosis_flipped", "defaults"]


class RuntimeFailure(RuntimeError):
    pass


def _parse_regime(spec: str, tax_level: float) -> RegulatoryRegime:
    parts = {p.strip().lower() for p in spec.split(",") if p.strip()}
    parts.discard("baseline")
    unknown = parts - {"ssban", "var", "tt"}
    if unknown:
        raise ConfigError("--regime", f"unknown measure(s): {', '.join(sorted(unknown))}")
    return RegulatoryRegime(ssban="ssban" in parts, var_limit="var" in parts,
                            tax_level=tax_level if "tt" in parts else 0.0)


def resolve(args) -> tuple[SimulationConfig, int]:
    cfg = load_config(args.config)
    over = {}
    if getattr(args, "runs", None) is not None:
        over["n_runs"] = args.runs
    if getattr(args, "jobs", None) is not None:
        over["parallelism"] = args.jobs
    if getattr(args, "out", None) is not None:
        over["directory"] = args.out
    if getattr(args, "mispricing_sign", None) is not None:
        over["mispricing_sign"] = args.mispricing_sign
    if getattr(args, "return_convention", None) is not None:
        over["return_convention"] = args.return_convention
    if getattr(args, "tax_deduction", None) is not None:
        over["tax_deduction"] = args.tax_deduction
    if getattr(args, "burn_in", None) is not None:
        over["burn_in"] = args.burn_in
    if getattr(args, "trajectories", None) is not None:
        over["trajectories"] = args.trajectories
    if getattr(args, "tax_levels", None) is not None:
        over["tax_levels"] = tuple(float(x) for x in args.tax_levels.split(","))
    if getattr(args, "timesteps", None) is not None:
        over["calibration"] = replace(cfg.calibration, n_timesteps=args.timesteps)
        cfg = replace(cfg, **over)
        over = {}
    cfg = replace(cfg, **over)
    tax = args.tax_level if getattr(args, "tax_level", None) is not None \
        else (cfg.regime.tax_level or cfg.calibration.tobin_tax)
    if getattr(args, "regime", None) is not None:
        cfg = replace(cfg, regime=_parse_regime(args.regime, tax))
    elif getattr(args, "tax_level", None) is not None and cfg.regime.tt:
        cfg = replace(cfg, regime=replace(cfg.regime, tax_level=args.tax_level))
    validate(cfg)

    if args.seed is not None:
        seed = args.seed
    elif cfg.master_seed is not None:
        seed = cfg.master_seed
    elif os.environ.get("REGMKT_SEED"):
        try:
            seed = int(os.environ["REGMKT_SEED"])
        except ValueError as exc:
            raise ConfigError("REGMKT_SEED", "must be an integer") from exc
    else:
        seed = 0
    cfg = replace(cfg, master_seed=seed)
    return cfg, seed


def _run_config(cfg: SimulationConfig, seed: int, run_index: int = 0, **kw) -> RunConfig:
    return RunConfig(calibration=cfg.calibration, regime=cfg.regime, seed=seed,
                     run_index=run_index, tax_deduction=cfg.tax_deduction,
                     mispricing_sign=cfg.sign, return_convention=cfg.return_convention,
                     burn_in=cfg.burn_in, **kw)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: SimulationConfig, seed: int, run_index: int = 0) -> Path:
    out = Path(cfg.directory)
    h = cfg.config_hash()
    result = run(_run_config(cfg, seed, run_index, record_per_agent=cfg.trajectories))
    write_csv(out / "prices.csv", ["t", "price"], enumerate(result.prices), seed, h)
    if cfg.trajectories and result.per_agent_demand is not None:
        d = result.per_agent_demand
        rows = ((t, i, d[t, i]) for t in range(d.shape[0]) for i in range(d.shape[1]))
        write_csv(out / "trades.csv", ["t", "agent", "demand"], rows, seed, h)
    rec = metrics.compute_metrics(result, cfg.return_convention)
    payload = rec.as_dict()
    payload.update(regime={"ssban": cfg.regime.ssban, "var_limit": cfg.regime.var_limit,
                           "tax_level": cfg.regime.tax_level},
                   default_events=len(result.default_events),
                   jump_steps=result.jump_steps, aborted=result.aborted,
                   abort_message=result.abort_message)
    write_json(out / "metrics.json", payload, seed, h)
    if result.aborted:
        raise RuntimeFailure(result.abort_message)
    return out


REGRESSION_METHODS = {
    "FGLS": "OLS first stage; one residual variance per regime cell (ddof 1); "
            "weighted least squares with weights 1/variance",
    "median": "cell medians mapped through the 8x8 factorial system; standard errors "
              "from 1000 bootstrap resamples of runs within each cell; normal p-values",
}


def regression_rows(records) -> tuple[list[dict], list[str]]:
    rows, notes = [], []
    for resp in RESPONSES:
        for model in ("FGLS", "median"):
            try:
                kw = {"seed": records[0].seed} if model == "median" else {}
                fit = analysis.regress_records(records, resp, model, **kw)
            except (ValueError, np.linalg.LinAlgError) as exc:
                log.warning("%s regression on %s skipped: %s", model, resp, exc)
                notes.append(f"{model} {resp} skipped: {exc}")
                continue
            rows.extend(fit.rows(resp))
            notes.extend(f"{model} {resp}: {n}" for n in fit.notes
                         if not n.startswith("bootstrap"))
    return rows, notes


def cmd_grid(cfg: SimulationConfig, seed: int) -> Path:
    out = Path(cfg.directory)
    h = cfg.config_hash()
    records = experiments.regime_grid(cfg.plan(seed))
    write_csv(out / "grid.csv", GRID_COLUMNS, [r.as_dict() for r in records], seed, h)
    rows, notes = regression_rows(records)
    write_csv(out / "regression.csv", REGRESSION_COLUMNS, rows, seed, h)
    write_json(out / "regression_meta.json",
               {"methods": REGRESSION_METHODS, "notes": notes,
                "n_records": len(records), "n_aborted": sum(r.aborted for r in records)},
               seed, h)
    return out


def cmd_sweep(cfg: SimulationConfig, seed: int) -> Path:
    out = Path(cfg.directory)
    h = cfg.config_hash()
    by_regime, pooled = experiments.tobin_sweep(cfg.plan(seed))
    write_csv(out / "sweep.csv", SWEEP_COLUMNS,
              [row for c in pooled for row in c.rows()], seed, h)
    write_csv(out / "sweep_by_regime.csv", SWEEP_COLUMNS,
              [row for c in by_regime for row in c.rows()], seed, h)
    return out


def cmd_stylized(cfg: SimulationConfig, seed: int, synthetic: bool = False,
                 max_lag: int = 20, excerpt: int = 500) -> Path:
    out = Path(cfg.directory)
    h = cfg.config_hash()
    n_ret = cfg.calibration.n_timesteps - 1
    if n_ret <= max_lag:
        raise ConfigError("calibration.n_timesteps",
                          f"stylized facts need more than {max_lag + 1} timesteps")
    if synthetic:
        gen = RngState(seed, 0, SYNTHETIC).generator()
        r = 0.0265 * gen.standard_normal(n_ret)
    else:
        base = replace(cfg, regime=RegulatoryRegime())
        result = run(_run_config(base, seed))
        if result.aborted:
            raise RuntimeFailure(result.abort_message)
        r = metrics.returns(result.prices, cfg.return_convention)
    rep = metrics.stylized_facts_report(r, max_lag=max_lag)
    write_csv(out / "density.csv", ["x", "kde", "normal"],
              zip(rep.density["x"], rep.density["kde"], rep.density["normal"]), seed, h)
    write_csv(out / "qq.csv", ["prob", "sample", "normal", "student_t"],
              zip(rep.qq["prob"], rep.qq["sample"], rep.qq["normal"], rep.qq["student_t"]),
              seed, h)
    write_csv(out / "returns.csv", ["t", "return"], enumerate(r[:excerpt], 1), seed, h)
    lags = range(1, max_lag + 1)
    write_csv(out / "acf.csv", ["lag", "acf_returns", "acf_squared", "band_lo", "band_hi"],
              zip(lags, rep.acf_returns, rep.acf_squared, [-rep.band] * max_lag,
                  [rep.band] * max_lag), seed, h)
    return out


# ---------------------------------------------------------------------------
# argument parsing


def _bool_flag(p, name, help):
    g = p.add_mutually_exclusive_group()
    dest = name.replace("-", "_")
    g.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help)
    g.add_argument(f"--no-{name}", dest=dest, action="store_false")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="master seed (fallback: REGMKT_SEED)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--runs", type=int, help="runs per cell")
    common.add_argument("--timesteps", type=int, help="override n_timesteps")
    common.add_argument("--mispricing-sign", choices=["value", "price"])
    common.add_argument("--return-convention", choices=["log", "simple"])
    common.add_argument("--burn-in", type=int)
    _bool_flag(common, "tax-deduction", "deduct the tax from wealth after clearing")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="regmkt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="one run")
    s.add_argument("--regime", help="comma list of ssban,var,tt (default: config)")
    s.add_argument("--tax-level", type=float)
    s.add_argument("--run-index", type=int, default=0)
    _bool_flag(s, "trajectories", "write per-agent trades.csv")

    sub.add_parser("grid", parents=[common], help="2x2x2 regime grid + regressions")

    w = sub.add_parser("sweep", parents=[common], help="Tobin tax level sweep")
    w.add_argument("--tax-levels", help="comma separated rates")

    y = sub.add_parser("stylized", parents=[common], help="stylized-facts tables")
    y.add_argument("--synthetic", action="store_true",
                   help="use Gaussian returns instead of a simulated run")
    y.add_argument("--max-lag", type=int, default=20)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, seed = resolve(args)
        if args.command == "simulate":
            out = cmd_simulate(cfg, seed, args.run_index)
        elif args.command == "grid":
            out = cmd_grid(cfg, seed)
        elif args.command == "sweep":
            out = cmd_sweep(cfg, seed)
        else:
            out = cmd_stylized(cfg, seed, synthetic=args.synthetic, max_lag=args.max_lag)
    except ConfigError as exc:
        print(f"regmkt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeFailure as exc:
        print(f"regmkt: clearing failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"regmkt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
