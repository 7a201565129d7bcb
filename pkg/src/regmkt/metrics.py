"""Per-run outcome measures and stylized-facts tables."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .engine import RunResult

HEAVY_TAIL = 100.0


class UndefinedMetric(ValueError):
    """The statistic is not defined for this input (too short, zero variance)."""


@dataclass
class MetricsRecord:
    liquidity: float
    volatility: float
    volatility_pct: float
    kurtosis_flipped: float
    defaults: int
    seed: int
    run_index: int
    ssban: bool
    var: bool
    tt: bool
    tax_level: float
    aborted: bool = False
    shock_hash: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def log_returns(prices) -> np.ndarray:
    p = np.asarray(prices, dtype=float)
    if p.size < 2:
        raise UndefinedMetric("need at least two prices")
    if np.any(p <= 0):
        raise ValueError("prices must be > 0")
    return np.diff(np.log(p))


def simple_returns(prices) -> np.ndarray:
    p = np.asarray(prices, dtype=float)
    if p.size < 2:
        raise UndefinedMetric("need at least two prices")
    if np.any(p <= 0):
        raise ValueError("prices must be > 0")
    return p[1:] / p[:-1] - 1.0


def returns(prices, convention: str = "log") -> np.ndarray:
    return log_returns(prices) if convention == "log" else simple_returns(prices)


def liquidity(demand_matrix) -> float:
    """Average absolute change in holdings per agent and step."""
    d = np.asarray(demand_matrix, dtype=float)
    if d.ndim != 2 or d.shape[0] < 2:
        raise UndefinedMetric("need a (steps >= 2, agents) matrix")
    n_t, n_a = d.shape
    return float(np.abs(np.diff(d, axis=0)).sum() / ((n_t - 1) * n_a))


def liquidity_from_volume(volume, n_agents: int) -> float:
    """Same as :func:`liquidity` from per-step traded volume (``volume[0]`` unused)."""
    v = np.asarray(volume, dtype=float)
    if v.size < 2:
        raise UndefinedMetric("need at least two steps")
    return float(v[1:].sum() / ((v.size - 1) * n_agents))


def volatility(r) -> float:
    r = np.asarray(r, dtype=float)
    if r.size < 2:
        raise UndefinedMetric("need at least two returns")
    # shifting by r[0] makes a constant series give exactly 0
    return float((r - r[0]).std(ddof=1))


def flipped_kurtosis(r) -> float:
    """Excess kurtosis of the negative returns mirrored about zero.

    Positive returns are dropped; the negative ones and their mirror images
    form a symmetric sample whose mean is zero by construction.
    """
    r = np.asarray(r, dtype=float)
    neg = r[r < 0]
    if neg.size < 4:
        raise UndefinedMetric(f"need at least 4 negative returns, got {neg.size}")
    m2 = np.mean(neg**2)
    m4 = np.mean(neg**4)
    return float(m4 / m2**2 - 3.0)


def excess_kurtosis(r) -> float:
    r = np.asarray(r, dtype=float)
    if r.size < 4 or np.ptp(r) == 0:
        raise UndefinedMetric("kurtosis needs >= 4 non-constant values")
    return float(stats.kurtosis(r, fisher=True, bias=True))


def acf(series, max_lag: int) -> tuple[np.ndarray, float]:
    """Sample autocorrelations at lags ``1..max_lag`` and the 95% white-noise band."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if n <= max_lag:
        raise UndefinedMetric("series must be longer than max_lag")
    x = x - x.mean()
    denom = np.dot(x, x)
    if denom == 0:
        raise UndefinedMetric("zero-variance series")
    vals = np.array([np.dot(x[:-k], x[k:]) / denom for k in range(1, max_lag + 1)])
    return vals, 1.96 / np.sqrt(n)


def compute_metrics(run: RunResult, convention: str = "log") -> MetricsRecord:
    reg = run.regime
    rec = dict(seed=run.seed, run_index=run.run_index, ssban=reg.ssban,
               var=reg.var_limit, tt=reg.tt, tax_level=reg.tax_level,
               defaults=run.n_defaults, aborted=run.aborted,
               shock_hash=run.shock_hash)
    if run.aborted or run.prices.size < 2:
        nan = float("nan")
        return MetricsRecord(liquidity=nan, volatility=nan, volatility_pct=nan,
                             kurtosis_flipped=nan, **rec)
    r = returns(run.prices, convention)
    if run.per_agent_demand is not None:
        liq = liquidity(run.per_agent_demand)
    else:
        liq = liquidity_from_volume(run.volume, run.n_agents)
    vol = volatility(r)
    try:
        kf = flipped_kurtosis(r)
    except UndefinedMetric:
        kf = float("nan")
    return MetricsRecord(liquidity=liq, volatility=vol, volatility_pct=100.0 * vol,
                         kurtosis_flipped=kf, **rec)


# ---------------------------------------------------------------------------
# figure data


def density_table(r, n_grid: int = 200) -> dict[str, np.ndarray]:
    """Gaussian KDE of returns next to a normal with the same mean and sd."""
    r = np.asarray(r, dtype=float)
    if r.size < 2 or np.ptp(r) == 0:
        raise UndefinedMetric("density needs a non-constant sample")
    sd = r.std(ddof=1)
    grid = np.linspace(r.min() - sd, r.max() + sd, n_grid)
    kde = stats.gaussian_kde(r)
    return {"x": grid, "kde": kde(grid), "normal": stats.norm.pdf(grid, r.mean(), sd)}


def qq_table(r, df: int = 7) -> dict[str, np.ndarray]:
    """Sorted standardized returns against normal and Student-t quantiles.

    The t quantiles are rescaled to unit variance so both references share
    the 45-degree line for matching distributions.
    """
    r = np.asarray(r, dtype=float)
    if r.size < 2 or np.ptp(r) == 0:
        raise UndefinedMetric("QQ needs a non-constant sample")
    z = np.sort((r - r.mean()) / r.std(ddof=1))
    probs = (np.arange(1, z.size + 1) - 0.5) / z.size
    t_scale = np.sqrt((df - 2) / df)
    return {"prob": probs, "sample": z, "normal": stats.norm.ppf(probs),
            "student_t": stats.t.ppf(probs, df) * t_scale}


@dataclass
class StylizedFactsReport:
    density: dict
    qq: dict
    returns: np.ndarray
    acf_returns: np.ndarray
    acf_squared: np.ndarray
    band: float
    excess_kurtosis: float


def stylized_facts_report(run_or_returns, max_lag: int = 20, excerpt: int | None = None,
                          convention: str = "log") -> StylizedFactsReport:
    """Numeric tables behind the four stylized-facts panels."""
    if isinstance(run_or_returns, RunResult):
        if run_or_returns.aborted:
            raise UndefinedMetric("run was aborted")
        r = returns(run_or_returns.prices, convention)
    else:
        r = np.asarray(run_or_returns, dtype=float)
    if r.size == 0:
        raise UndefinedMetric("empty return series")
    a_r, band = acf(r, max_lag)
    a_sq, _ = acf(r**2, max_lag)
    return StylizedFactsReport(
        density=density_table(r), qq=qq_table(r),
        returns=r if excerpt is None else r[:excerpt],
        acf_returns=a_r, acf_squared=a_sq, band=band,
        excess_kurtosis=excess_kurtosis(r),
    )
