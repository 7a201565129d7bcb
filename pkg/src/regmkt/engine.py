"""Time loop of a single simulation run.

Per step: perceptions move, agents whose timeout expired re-enter, the market
clears with wealth marked to the candidate price, wealth and holdings are
committed, an optional tax is deducted, defaults are processed, and the new
asset return is appended to the VaR history.

The loop body lives in :func:`step_kernel`; :func:`run` drives it from a
compiled loop and :func:`step` exposes it one step at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import clearing as cl
from .model import VAR_FLOOR, Calibration, RegulatoryRegime, var_alpha
from .stochastic import NoiseSpec, shock_matrix, stream_hash


@dataclass(frozen=True)
class RunConfig:
    calibration: Calibration = field(default_factory=Calibration)
    regime: RegulatoryRegime = field(default_factory=RegulatoryRegime)
    seed: int = 0
    run_index: int = 0
    record_per_agent: bool = False
    tax_deduction: bool = False
    mispricing_sign: int = 1
    return_convention: str = "log"
    burn_in: int = 0
    initial_log_perceived: float | None = None  # None -> log V

    def __post_init__(self):
        if self.mispricing_sign not in (1, -1):
            raise ValueError("mispricing_sign must be +1 or -1")
        if self.return_convention not in ("log", "simple"):
            raise ValueError("return_convention must be 'log' or 'simple'")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")

    @property
    def noise(self) -> NoiseSpec:
        c = self.calibration
        return NoiseSpec(c.eps_sigma, c.eps_corr, c.n_agents)

    @property
    def total_steps(self) -> int:
        """Steps after the initial clearing, including burn-in."""
        return self.burn_in + self.calibration.n_timesteps - 1


@dataclass
class RunResult:
    prices: np.ndarray
    volume: np.ndarray  # sum_i |D_t - D_{t-1}| per step; volume[0] = 0
    default_events: list[tuple[int, int]]
    per_agent_demand: np.ndarray | None = None
    clearing_failures: int = 0
    aborted: bool = False
    abort_message: str = ""
    jump_steps: int = 0
    max_residual: float = 0.0  # largest |residual| over continuously cleared steps
    seed: int = 0
    run_index: int = 0
    regime: RegulatoryRegime = field(default_factory=RegulatoryRegime)
    n_agents: int = 0
    shock_hash: str = ""

    @property
    def n_defaults(self) -> int:
        return len(self.default_events)


@dataclass
class MarketState:
    """Mutable per-run state.  ``returns[:n_returns]`` is the asset return history."""

    log_perceived: np.ndarray
    wealth: np.ndarray
    holdings: np.ndarray
    defaulted: np.ndarray
    countdown: np.ndarray
    window_start: np.ndarray
    returns: np.ndarray
    n_returns: int
    price: float
    t: int = 0

    @classmethod
    def initial(cls, cal: Calibration, capacity: int, log_perceived=None) -> MarketState:
        n = cal.n_agents
        lp = np.full(n, math.log(cal.fundamental_value)) if log_perceived is None \
            else np.broadcast_to(np.asarray(log_perceived, float), (n,)).copy()
        return cls(
            log_perceived=lp,
            wealth=np.full(n, float(cal.initial_wealth)),
            holdings=np.zeros(n),
            defaulted=np.zeros(n, dtype=np.bool_),
            countdown=np.zeros(n, dtype=np.int64),
            window_start=np.zeros(n, dtype=np.int64),
            returns=np.zeros(max(capacity, 1)),
            n_returns=0,
            price=float(cal.fundamental_value),
        )

    @property
    def active(self) -> np.ndarray:
        return ~self.defaulted


@dataclass
class TimestepRecord:
    t: int
    price: float
    demand: np.ndarray
    residual: float
    at_jump: bool
    defaults: np.ndarray  # agent ids defaulting this step
    reintroduced: np.ndarray
    var_estimate: np.ndarray  # NaN where the VaR cap was skipped
    wealth_at_price: np.ndarray
    volume: float


class _Params:
    """Flattened constants passed to the compiled kernels."""

    def __init__(self, cal: Calibration, regime: RegulatoryRegime, *,
                 tax_deduction=False, mispricing_sign=1, return_convention="log",
                 tolerance=cl.SOLVER_TOL):
        self.beta = cal.betas()
        self.can_short = cal.shorts_allowed() & (not regime.ssban)
        self.var_window = cal.var_windows()
        self.gamma = cal.gammas(regime.tax_level)
        self.var_limit = bool(regime.var_limit)
        self.alpha = var_alpha(cal.var_quantile)
        self.rho = float(cal.rho)
        self.log_v = math.log(cal.fundamental_value)
        self.lambda_max = float(cal.lambda_max)
        self.w0 = float(cal.initial_wealth)
        self.threshold = float(cal.default_threshold)
        self.timeout = int(cal.default_timeout)
        self.n_shares = float(cal.n_shares)
        self.sign = int(mispricing_sign)
        self.tax_level = float(regime.tax_level)
        self.tax_deduction = bool(tax_deduction)
        self.log_returns = return_convention == "log"
        self.tol_abs = tolerance * cal.n_shares

    def args(self):
        return (self.beta, self.can_short, self.var_window, self.gamma, self.var_limit,
                self.alpha, self.rho, self.log_v, self.lambda_max, self.w0,
                self.threshold, self.timeout, self.n_shares, self.sign,
                self.tax_level, self.tax_deduction, self.log_returns, self.tol_abs)


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def initial_clear_kernel(log_perc, wealth, p_start, beta, can_short, gamma,
                         lambda_max, n_shares, sign, tol_abs, out):
    n = beta.shape[0]
    active = np.ones(n, dtype=np.bool_)
    var_on = np.zeros(n, dtype=np.bool_)
    var_est = np.ones(n)
    holdings = np.zeros(n)
    return cl.clear_kernel(p_start, log_perc, beta, wealth, holdings, p_start, active,
                           can_short, var_on, var_est, gamma, lambda_max, 0.0,
                           n_shares, sign, tol_abs, cl.PRICE_FLOOR, cl.PRICE_CEILING, out)


@njit(cache=True)
def step_kernel(eps, log_perc, wealth, holdings, defaulted, countdown, window_start,
                returns, n_ret, price_prev,
                beta, can_short, var_window, gamma, var_limit, alpha, rho, log_v,
                lambda_max, w0, threshold, timeout, n_shares, sign, tax_level,
                tax_deduction, log_returns, tol_abs,
                demand_out, default_out, reintro_out, var_out, w_out):
    """Advance the state arrays in place by one step.

    Returns ``(price, residual, status, n_defaults, volume)``.  On a solver
    failure the state is left with updated perceptions only.
    """
    n = beta.shape[0]
    for i in range(n):
        log_perc[i] = rho * log_perc[i] + (1.0 - rho) * log_v + eps[i]

    active = np.empty(n, dtype=np.bool_)
    for i in range(n):
        reintro_out[i] = False
        if defaulted[i]:
            if countdown[i] <= 0:
                defaulted[i] = False
                wealth[i] = w0
                holdings[i] = 0.0
                window_start[i] = n_ret
                reintro_out[i] = True
            else:
                countdown[i] -= 1
        active[i] = not defaulted[i]

    var_on = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        var_out[i] = np.nan
        if var_limit and active[i]:
            L = var_window[i]
            if n_ret - window_start[i] >= L:
                s = 0.0
                for k in range(n_ret - L, n_ret):
                    s += returns[k]
                mu = s / L
                ss = 0.0
                for k in range(n_ret - L, n_ret):
                    ss += (returns[k] - mu) ** 2
                sd = math.sqrt(ss / (L - 1))
                v = alpha * sd - mu
                if v < VAR_FLOOR:
                    v = VAR_FLOOR
                var_out[i] = v
                var_on[i] = True
    var_est = np.where(var_on, var_out, 1.0)

    price, res, it, nev, status = cl.clear_kernel(
        price_prev, log_perc, beta, wealth, holdings, price_prev, active, can_short,
        var_on, var_est, gamma, lambda_max, threshold, n_shares, sign, tol_abs,
        cl.PRICE_FLOOR, cl.PRICE_CEILING, demand_out)
    if status == cl.NO_BRACKET or status == cl.NON_FINITE:
        return price, res, status, 0, 0.0

    n_def = 0
    volume = 0.0
    for i in range(n):
        default_out[i] = False
        if not active[i]:
            w_out[i] = 0.0
            demand_out[i] = 0.0
            continue
        w = wealth[i] + holdings[i] * (price - price_prev)
        w_out[i] = w
        d = demand_out[i]
        if tax_deduction:
            w -= tax_level * price * abs(d - holdings[i])
        if w < threshold:
            default_out[i] = True
            defaulted[i] = True
            countdown[i] = timeout
            n_def += 1
            d = 0.0
            w = 0.0
            demand_out[i] = 0.0
        volume += abs(d - holdings[i])
        holdings[i] = d
        wealth[i] = w

    if log_returns:
        returns[n_ret] = math.log(price / price_prev)
    else:
        returns[n_ret] = price / price_prev - 1.0
    return price, res, status, n_def, volume


@njit(cache=True)
def run_kernel(shocks, record_from, record_demand, log_perc, wealth, holdings,
               defaulted, countdown, window_start, returns, price0,
               beta, can_short, var_window, gamma, var_limit, alpha, rho, log_v,
               lambda_max, w0, threshold, timeout, n_shares, sign, tax_level,
               tax_deduction, log_returns, tol_abs,
               prices, volume, demand_mat, default_mat, diag):
    """Run ``shocks.shape[0]`` steps after the initial clearing.

    Row ``k`` of the recorded arrays is step ``record_from + k`` (step 0 is
    the initial clearing).  ``diag`` receives ``[steps_done, jumps,
    max_ok_residual, failed_status, failed_price, failed_residual]``.
    """
    n = beta.shape[0]
    d_out = np.empty(n)
    def_out = np.empty(n, dtype=np.bool_)
    re_out = np.empty(n, dtype=np.bool_)
    var_out = np.empty(n)
    w_out = np.empty(n)
    price = price0
    if record_from == 0:
        prices[0] = price0
        if record_demand:
            demand_mat[0, :] = holdings
    n_ret = 0
    jumps = 0
    max_res = 0.0
    for s in range(shocks.shape[0]):
        p, res, status, nd, vol = step_kernel(
            shocks[s], log_perc, wealth, holdings, defaulted, countdown, window_start,
            returns, n_ret, price,
            beta, can_short, var_window, gamma, var_limit, alpha, rho, log_v,
            lambda_max, w0, threshold, timeout, n_shares, sign, tax_level,
            tax_deduction, log_returns, tol_abs,
            d_out, def_out, re_out, var_out, w_out)
        if status == cl.NO_BRACKET or status == cl.NON_FINITE:
            diag[0] = s
            diag[3] = status
            diag[4] = p
            diag[5] = res
            diag[1] = jumps
            diag[2] = max_res
            return
        n_ret += 1
        price = p
        t = s + 1
        k = t - record_from
        if k >= 0:
            if status == cl.JUMP:
                jumps += 1
            elif abs(res) > max_res:
                max_res = abs(res)
            prices[k] = p
            volume[k] = vol if k > 0 else 0.0
            for i in range(n):
                if def_out[i]:
                    default_mat[k, i] = True
            if record_demand:
                demand_mat[k, :] = holdings
    diag[0] = shocks.shape[0]
    diag[1] = jumps
    diag[2] = max_res
    diag[3] = 0


# ---------------------------------------------------------------------------
# public API


def initial_state(config: RunConfig) -> tuple[MarketState, _Params]:
    """State after the deterministic initial clearing at the fundamental."""
    cal = config.calibration
    params = _Params(cal, config.regime, tax_deduction=config.tax_deduction,
                     mispricing_sign=config.mispricing_sign,
                     return_convention=config.return_convention)
    state = MarketState.initial(cal, config.total_steps + 1, config.initial_log_perceived)
    out = np.empty(cal.n_agents)
    price, res, _, _, status = initial_clear_kernel(
        state.log_perceived, state.wealth, float(cal.fundamental_value), params.beta,
        params.can_short, params.gamma, params.lambda_max, params.n_shares,
        params.sign, params.tol_abs, out)
    _raise_for(status, price, res)
    state.price = price
    state.holdings = out
    return state, params


def _raise_for(status, price, res):
    if status == cl.NO_BRACKET:
        raise cl.NoBracket(f"no sign change of excess demand (last price {price:.6g}, "
                           f"excess {res:.6g})")
    if status == cl.NON_FINITE:
        raise cl.NonFinite(f"non-finite excess demand at price {price!r}")


def step(state: MarketState, params: _Params, shocks: np.ndarray) -> TimestepRecord:
    """Advance ``state`` in place by one step and describe what happened."""
    n = len(state.wealth)
    shocks = np.ascontiguousarray(shocks, dtype=np.float64)
    if shocks.shape != (n,):
        raise ValueError(f"expected {n} shocks, got shape {shocks.shape}")
    if state.n_returns >= len(state.returns):
        state.returns = np.concatenate([state.returns, np.zeros(len(state.returns) + 1)])
    d_out = np.empty(n)
    def_out = np.empty(n, dtype=np.bool_)
    re_out = np.empty(n, dtype=np.bool_)
    var_out = np.empty(n)
    w_out = np.empty(n)
    p_prev = state.price
    price, res, status, _, vol = step_kernel(
        shocks, state.log_perceived, state.wealth, state.holdings, state.defaulted,
        state.countdown, state.window_start, state.returns, state.n_returns, p_prev,
        *params.args(), d_out, def_out, re_out, var_out, w_out)
    _raise_for(status, price, res)
    state.n_returns += 1
    state.price = price
    state.t += 1
    return TimestepRecord(t=state.t, price=price, demand=state.holdings.copy(),
                          residual=res, at_jump=status == cl.JUMP,
                          defaults=np.flatnonzero(def_out),
                          reintroduced=np.flatnonzero(re_out),
                          var_estimate=var_out, wealth_at_price=w_out, volume=vol)


def run(config: RunConfig, shocks: np.ndarray | None = None) -> RunResult:
    """Simulate one run.  ``shocks`` overrides the seeded stream (testing)."""
    cal = config.calibration
    n, n_t = cal.n_agents, cal.n_timesteps
    if shocks is None:
        shocks = shock_matrix(config.noise, config.seed, config.run_index,
                              config.total_steps)
    shocks = np.ascontiguousarray(shocks, dtype=np.float64)
    if shocks.shape != (config.total_steps, n):
        raise ValueError(f"shocks must have shape {(config.total_steps, n)}")

    result = RunResult(prices=np.empty(0), volume=np.empty(0), default_events=[],
                       seed=config.seed, run_index=config.run_index,
                       regime=config.regime, n_agents=n, shock_hash=stream_hash(shocks))
    try:
        state, params = initial_state(config)
    except cl.ClearingError as exc:
        result.aborted, result.abort_message, result.clearing_failures = True, str(exc), 1
        return result

    prices = np.full(n_t, np.nan)
    volume = np.zeros(n_t)
    demand_mat = np.zeros((n_t, n) if config.record_per_agent else (1, n))
    default_mat = np.zeros((n_t, n), dtype=np.bool_)
    diag = np.zeros(6)
    run_kernel(shocks, config.burn_in, config.record_per_agent, state.log_perceived,
               state.wealth, state.holdings, state.defaulted, state.countdown,
               state.window_start, state.returns, state.price, *params.args(),
               prices, volume, demand_mat, default_mat, diag)

    done = int(diag[0])
    status = int(diag[3])
    result.jump_steps = int(diag[1])
    result.max_residual = float(diag[2])
    n_rec = n_t
    if status != 0:
        n_rec = max(done + 1 - config.burn_in, 0)
        result.aborted = True
        result.clearing_failures = 1
        kind = "NoBracket" if status == cl.NO_BRACKET else "NonFinite"
        result.abort_message = (f"{kind} at step {done + 1}: price {diag[4]:.6g}, "
                                f"excess {diag[5]:.6g}")
    result.prices = prices[:n_rec]
    result.volume = volume[:n_rec]
    if config.record_per_agent:
        result.per_agent_demand = demand_mat[:n_rec]
    tt, ii = np.nonzero(default_mat[:n_rec])
    result.default_events = [(int(a), int(b)) for a, b in zip(tt, ii)]
    return result
