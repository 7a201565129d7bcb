"""Regime grid and tax-level sweep with common random numbers.

Run ``r`` of every cell draws its shocks from the stream keyed by
``(master_seed, r)``, so cells differ only through the regime.  Runs are
independent and may be farmed out to worker processes; results are always
returned in (cell, run_index) order.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import RunConfig, run
from .metrics import HEAVY_TAIL, MetricsRecord, compute_metrics
from .model import Calibration, RegulatoryRegime

log = logging.getLogger(__name__)

DEFAULT_TAX_LEVELS = (0.0, 0.001, 0.003, 0.005, 0.01, 0.02, 0.03, 0.05)
SUMMARY_METRICS = ("volatility", "kurtosis_flipped", "liquidity", "defaults")


@dataclass(frozen=True)
class ExperimentPlan:
    calibration: Calibration = field(default_factory=Calibration)
    regimes: tuple[RegulatoryRegime, ...] = ()
    tax_levels: tuple[float, ...] = DEFAULT_TAX_LEVELS
    n_runs: int = 100
    master_seed: int = 0
    jobs: int = 1
    tax_deduction: bool = False
    mispricing_sign: int = 1
    return_convention: str = "log"
    burn_in: int = 0

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        levels = tuple(float(x) for x in self.tax_levels)
        if any(x < 0 for x in levels):
            raise ValueError("tax levels must be non-negative")
        object.__setattr__(self, "tax_levels", tuple(sorted(levels)))
        object.__setattr__(self, "regimes", tuple(self.regimes))

    def run_config(self, regime: RegulatoryRegime, run_index: int) -> RunConfig:
        return RunConfig(calibration=self.calibration, regime=regime,
                         seed=self.master_seed, run_index=run_index,
                         tax_deduction=self.tax_deduction,
                         mispricing_sign=self.mispricing_sign,
                         return_convention=self.return_convention,
                         burn_in=self.burn_in)


def _one(config: RunConfig) -> MetricsRecord:
    result = run(config)
    if result.aborted:
        log.warning("run %d (%s) aborted: %s", config.run_index,
                    config.regime.label, result.abort_message)
    return compute_metrics(result, config.return_convention)


def run_cells(plan: ExperimentPlan, regimes) -> list[MetricsRecord]:
    """All ``n_runs`` runs for each regime, ordered by regime then run index."""
    configs = [plan.run_config(reg, r) for reg in regimes for r in range(plan.n_runs)]
    if plan.jobs > 1:
        with ProcessPoolExecutor(max_workers=plan.jobs) as pool:
            return list(pool.map(_one, configs, chunksize=max(1, len(configs) // (4 * plan.jobs))))
    return [_one(c) for c in configs]


def grid_regimes(plan: ExperimentPlan) -> list[RegulatoryRegime]:
    regimes = list(plan.regimes) or RegulatoryRegime.grid(plan.calibration.tobin_tax)
    combos = {(r.ssban, r.var_limit, r.tt) for r in regimes}
    if len(combos) != 8:
        raise ValueError("a regime grid must cover all 8 (ssban, var, tt) combinations")
    return regimes


def regime_grid(plan: ExperimentPlan) -> list[MetricsRecord]:
    """``8 * n_runs`` records; aborted runs are kept and flagged."""
    records = run_cells(plan, grid_regimes(plan))
    n_abort = sum(r.aborted for r in records)
    if n_abort:
        log.warning("%d of %d grid runs aborted", n_abort, len(records))
    return records


def sweep_regimes(plan: ExperimentPlan) -> list[RegulatoryRegime]:
    return [RegulatoryRegime(ssban=bool(s), var_limit=bool(v), tax_level=tax)
            for s in (0, 1) for v in (0, 1) for tax in plan.tax_levels]


def sweep_records(plan: ExperimentPlan) -> list[MetricsRecord]:
    return run_cells(plan, sweep_regimes(plan))


@dataclass
class CellSummary:
    """Across-run statistics for one cell; ``ssban``/``var`` are None when pooled."""

    ssban: bool | None
    var: bool | None
    tax_level: float
    n_runs: int
    n_aborted: int
    stats: dict[str, dict[str, float]]
    frac_kurtosis_gt_100: float

    @property
    def label(self) -> str:
        if self.ssban is None:
            return "all"
        return f"ssban={'on' if self.ssban else 'off'} & VaR={'on' if self.var else 'off'}"

    def rows(self) -> list[dict]:
        base = dict(regime=self.label,
                    ssban="" if self.ssban is None else int(self.ssban),
                    var="" if self.var is None else int(self.var),
                    tax_level=self.tax_level, n_runs=self.n_runs, n_aborted=self.n_aborted)
        return [dict(base, metric=m, **s, frac_kurtosis_gt_100=self.frac_kurtosis_gt_100)
                for m, s in self.stats.items()]


def summarize_cell(records: list[MetricsRecord], ssban, var, tax_level,
                   metrics=SUMMARY_METRICS) -> CellSummary:
    ok = [r for r in records if not r.aborted]
    out = {}
    for m in metrics:
        vals = np.array([float(getattr(r, m)) for r in ok])
        vals = vals[np.isfinite(vals)]
        if vals.size:
            out[m] = dict(mean=float(vals.mean()), median=float(np.median(vals)),
                          q75=float(np.quantile(vals, 0.75)))  # type-7 interpolation
        else:
            out[m] = dict(mean=np.nan, median=np.nan, q75=np.nan)
    kurt = np.array([r.kurtosis_flipped for r in ok], dtype=float)
    frac = float(np.mean(kurt > HEAVY_TAIL)) if kurt.size else float("nan")
    return CellSummary(ssban, var, float(tax_level), len(records),
                       len(records) - len(ok), out, frac)


def summarize_sweep(records: list[MetricsRecord], tax_levels) -> tuple[list[CellSummary], list[CellSummary]]:
    """Per-regime summaries and the pooled-across-regimes view, by tax level."""
    by_regime, pooled = [], []
    for s in (False, True):
        for v in (False, True):
            for tax in tax_levels:
                cell = [r for r in records if r.ssban == s and r.var == v
                        and r.tax_level == tax]
                by_regime.append(summarize_cell(cell, s, v, tax))
    for tax in tax_levels:
        pooled.append(summarize_cell([r for r in records if r.tax_level == tax],
                                     None, None, tax))
    return by_regime, pooled


def tobin_sweep(plan: ExperimentPlan) -> tuple[list[CellSummary], list[CellSummary]]:
    return summarize_sweep(sweep_records(plan), plan.tax_levels)


def with_runs(plan: ExperimentPlan, n_runs: int) -> ExperimentPlan:
    return replace(plan, n_runs=n_runs)
