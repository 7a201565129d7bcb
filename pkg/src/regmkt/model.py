"""Demand side of the leveraged value-investor market.

Every agent turns a mispricing signal (perceived value minus price) into a
share demand that is linear in the signal and then clipped by whatever caps
are active: the leverage band, an optional Value-at-Risk band, and a floor at
zero for agents that may not (or are not allowed to) go short.  A transaction
tax adds a no-trade zone of half-width ``gamma`` around the previous holding.

The scalar kernels are numba-compiled so that the clearing solver and the run
loop can call them without leaving machine code.  The dataclass-level API
(:func:`demand` and friends) wraps the same kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from enum import Enum

import numpy as np
from numba import njit
from scipy.stats import norm

#: Lower bound for the per-unit VaR so the cap ``W / (p * VaR)`` stays finite.
VAR_FLOOR = 1e-6

#: Divisor in the tax threshold ``gamma_i = beta_i / 0.14 * tax``.
GAMMA_DIVISOR = 0.14


class ConfigError(ValueError):
    """A configuration value violates its documented constraint."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class VarWarmup(ValueError):
    """Raised when a return window is too short to estimate VaR."""


@dataclass(frozen=True)
class Calibration:
    """Model constants.  Defaults reproduce the reference calibration."""

    n_agents: int = 150
    n_shares: float | None = None  # None -> 3 * n_agents
    beta_min: float = 10.0
    beta_max: float = 50.0
    initial_wealth: float = 2.0
    lambda_max: float = 10.0
    tau: float = 0.95
    rho: float = 0.99
    fundamental_value: float = 1.0
    eps_sigma: float = 0.025
    eps_corr: float = 0.4
    var_quantile: float = 0.99
    var_window_base: float = 500.0
    tobin_tax: float = 0.003
    gamma_scale: float = GAMMA_DIVISOR
    default_fraction: float = 0.1
    default_timeout: int = 100
    n_timesteps: int = 4000

    def __post_init__(self):
        if self.n_shares is None:
            object.__setattr__(self, "n_shares", 3.0 * self.n_agents)
        self.validate()

    def validate(self) -> None:
        def check(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        check(int(self.n_agents) == self.n_agents and self.n_agents >= 1,
              "n_agents", "must be an integer >= 1")
        check(self.n_shares > 0, "n_shares", "must be > 0")
        check(0 < self.beta_min <= self.beta_max, "beta_min",
              "need 0 < beta_min <= beta_max")
        check(self.initial_wealth > 0, "initial_wealth", "must be > 0")
        check(self.lambda_max >= 1, "lambda_max", "must be >= 1")
        check(0 <= self.tau <= 1, "tau", "must lie in [0, 1]")
        check(0 < self.rho < 1, "rho", "must lie in (0, 1)")
        check(self.fundamental_value > 0, "fundamental_value", "must be > 0")
        check(self.eps_sigma > 0, "eps_sigma", "must be > 0")
        lo = -1.0 / (self.n_agents - 1) if self.n_agents > 1 else -math.inf
        check(lo < self.eps_corr < 1, "eps_corr",
              f"must lie in ({lo:.6g}, 1) for a valid equicorrelation")
        check(0 < self.var_quantile < 1, "var_quantile", "must lie in (0, 1)")
        check(self.var_window_base > 0, "var_window_base", "must be > 0")
        check(self.tobin_tax >= 0, "tobin_tax", "must be >= 0")
        check(self.gamma_scale > 0, "gamma_scale", "must be > 0")
        check(0 < self.default_fraction < 1, "default_fraction",
              "must lie in (0, 1)")
        check(int(self.default_timeout) == self.default_timeout
              and self.default_timeout >= 0, "default_timeout",
              "must be a non-negative integer")
        check(int(self.n_timesteps) == self.n_timesteps
              and self.n_timesteps >= 1, "n_timesteps",
              "must be an integer >= 1")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def betas(self) -> np.ndarray:
        """Aggressiveness evenly spaced over ``[beta_min, beta_max]`` by index."""
        return np.linspace(self.beta_min, self.beta_max, self.n_agents)

    def shorts_allowed(self) -> np.ndarray:
        """The first ``floor(tau * N)`` agents never short."""
        flags = np.ones(self.n_agents, dtype=np.bool_)
        flags[: int(math.floor(self.tau * self.n_agents + 1e-9))] = False
        return flags

    def var_windows(self) -> np.ndarray:
        w = np.rint(self.var_window_base / self.betas()).astype(np.int64)
        return np.clip(w, 2, max(2, self.n_timesteps))

    def gammas(self, tax_level: float) -> np.ndarray:
        return self.betas() / self.gamma_scale * tax_level

    @property
    def default_threshold(self) -> float:
        return self.default_fraction * self.initial_wealth


@dataclass(frozen=True)
class RegulatoryRegime:
    ssban: bool = False
    var_limit: bool = False
    tax_level: float = 0.0

    def __post_init__(self):
        if not self.tax_level >= 0:
            raise ConfigError("tax_level", "must be >= 0")

    @property
    def tt(self) -> bool:
        return self.tax_level > 0

    @property
    def label(self) -> str:
        parts = [n for n, on in (("ssban", self.ssban), ("var", self.var_limit),
                                 ("tt", self.tt)) if on]
        return "+".join(parts) or "baseline"

    @classmethod
    def grid(cls, tax_level: float) -> list[RegulatoryRegime]:
        """All eight on/off combinations, baseline first."""
        return [cls(ssban=bool(s), var_limit=bool(v), tax_level=tax_level if t else 0.0)
                for t in (0, 1) for s in (0, 1) for v in (0, 1)]


class Status(Enum):
    ACTIVE = "active"
    DEFAULTED = "defaulted"


@dataclass
class AgentState:
    id: int
    beta: float
    wealth: float
    holdings: float = 0.0
    log_perceived: float = 0.0
    shorts_allowed: bool = True
    status: Status = Status.ACTIVE
    steps_remaining: int = 0
    return_window: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class DemandContext:
    price_candidate: float
    previous_demand: float
    previous_price: float
    wealth_at_price: float
    mispricing: float
    var_estimate: float | None = None

    def __post_init__(self):
        if not self.price_candidate > 0:
            raise ValueError("price_candidate must be > 0")
        if self.var_estimate is not None and not self.var_estimate > 0:
            raise ValueError("var_estimate must be > 0")


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def mispricing_kernel(log_perceived, price, sign):
    if sign >= 0:
        return math.exp(log_perceived) - price
    return price - math.exp(log_perceived)


@njit(cache=True)
def demand_kernel(m, beta, wealth, price, lambda_max, can_short,
                  var_on, var_est, gamma, prev_demand):
    """Capped (and tax-held) demand for one agent at one candidate price.

    ``can_short`` already folds in the ban.  ``var_est`` is ignored unless
    ``var_on``; ``gamma <= 0`` disables the no-trade zone.
    """
    scale = wealth / price
    d = beta * m * scale
    lo = (1.0 - lambda_max) * scale
    hi = lambda_max * scale
    if var_on:
        cap = scale / var_est
        if cap < hi:
            hi = cap
        if -cap > lo:
            lo = -cap
    if not can_short and lo < 0.0:
        lo = 0.0
    # lo <= 0 <= hi, so clipping picks the smallest |D| among binding caps
    if d > hi:
        d = hi
    elif d < lo:
        d = lo
    if gamma > 0.0 and abs(d - prev_demand) < gamma:
        # no-trade zone; a cap that has tightened below the old position still wins
        d = prev_demand
        if d > hi:
            d = hi
        elif d < lo:
            d = lo
    return d


# ---------------------------------------------------------------------------
# public API


def mispricing(log_perceived: float, price: float, sign: int = 1) -> float:
    """Perceived value minus price; ``sign=-1`` gives the price-minus-value convention."""
    if not price > 0:
        raise ValueError("price must be > 0")
    return mispricing_kernel(float(log_perceived), float(price), int(sign))


def unconstrained_demand(m: float, beta: float, wealth: float, price: float) -> float:
    if not price > 0:
        raise ValueError("price must be > 0")
    return beta * m * wealth / price


def leverage_bounds(wealth: float, price: float, lambda_max: float) -> tuple[float, float]:
    if not (price > 0 and wealth > 0):
        raise ValueError("price and wealth must be > 0")
    return (1.0 - lambda_max) * wealth / price, lambda_max * wealth / price


def var_alpha(var_quantile: float) -> float:
    return float(norm.ppf(var_quantile))


def compute_var(return_window, var_quantile: float = 0.99) -> float:
    """Per-unit variance-covariance VaR as a positive loss magnitude.

    ``alpha * sd - mean`` over the window (sample sd, n-1), floored at
    :data:`VAR_FLOOR`.
    """
    r = np.asarray(return_window, dtype=float)
    if r.size < 2:
        raise VarWarmup(f"need >= 2 returns, got {r.size}")
    return max(var_alpha(var_quantile) * r.std(ddof=1) - r.mean(), VAR_FLOOR)


def demand(agent: AgentState, ctx: DemandContext, regime: RegulatoryRegime,
           lambda_max: float = 10.0, gamma_scale: float = GAMMA_DIVISOR) -> float:
    """Demand of one agent under ``regime`` at ``ctx.price_candidate``."""
    if regime.var_limit and ctx.var_estimate is None:
        raise ValueError("var_limit regime needs a var_estimate")
    if agent.status is Status.DEFAULTED:
        return 0.0
    can_short = agent.shorts_allowed and not regime.ssban
    var_on = regime.var_limit
    gamma = agent.beta / gamma_scale * regime.tax_level
    return demand_kernel(ctx.mispricing, agent.beta, ctx.wealth_at_price,
                         ctx.price_candidate, lambda_max, can_short, var_on,
                         ctx.var_estimate if var_on else 1.0, gamma,
                         ctx.previous_demand)
