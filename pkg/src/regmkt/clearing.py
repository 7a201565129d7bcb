"""Market clearing: the price at which aggregate capped demand equals supply.

Each agent's wealth inside its demand is marked to the candidate price
(``W_prev + D_prev * (p - p_prev)``), so demand and price are solved jointly.
Excess demand is piecewise smooth (caps introduce kinks) and, under a
transaction tax, discontinuous.  The solver brackets a sign change by
expanding geometrically away from the previous price and then runs a Brent
iteration (bisection safeguarded inverse quadratic / secant steps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .model import (
    GAMMA_DIVISOR,
    AgentState,
    RegulatoryRegime,
    Status,
    demand_kernel,
    mispricing_kernel,
)

PRICE_FLOOR = 1e-6
PRICE_CEILING = 1e6
SOLVER_TOL = 1e-10
ACCEPT_TOL = 1e-8

# solver status codes
OK = 0
JUMP = 1
NO_BRACKET = 2
NON_FINITE = 3

_EPS = np.finfo(float).eps
_FIRST_LOG_STEP = 1e-3
_MAX_ITER = 400


class ClearingError(RuntimeError):
    pass


class NoBracket(ClearingError):
    """Excess demand keeps one sign on the whole admissible price range."""


class NonFinite(ClearingError):
    """A demand evaluation returned NaN or inf."""


@dataclass
class ClearingProblem:
    """Everything the clearing step needs, as per-agent arrays.

    ``wealth`` and ``holdings`` are the values carried over from the previous
    step; ``var_estimate`` is NaN for agents whose VaR cap is skipped.
    """

    log_perceived: np.ndarray
    beta: np.ndarray
    wealth: np.ndarray
    holdings: np.ndarray
    regime: RegulatoryRegime
    n_shares: float
    previous_price: float
    active: np.ndarray | None = None
    shorts_allowed: np.ndarray | None = None
    var_estimate: np.ndarray | None = None
    lambda_max: float = 10.0
    gamma_scale: float = GAMMA_DIVISOR
    wealth_floor: float = 0.0
    mispricing_sign: int = 1

    def __post_init__(self):
        n = len(self.beta)
        as_f = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
        self.log_perceived = as_f(self.log_perceived)
        self.beta = as_f(self.beta)
        self.wealth = as_f(self.wealth)
        self.holdings = as_f(self.holdings)
        if self.active is None:
            self.active = np.ones(n, dtype=np.bool_)
        if self.shorts_allowed is None:
            self.shorts_allowed = np.ones(n, dtype=np.bool_)
        self.active = np.ascontiguousarray(self.active, dtype=np.bool_)
        self.shorts_allowed = np.ascontiguousarray(self.shorts_allowed, dtype=np.bool_)
        if self.var_estimate is None:
            self.var_estimate = np.full(n, np.nan)
        self.var_estimate = as_f(self.var_estimate)
        if not self.active.any():
            raise ValueError("clearing needs at least one active agent")
        if not (self.n_shares > 0 and self.previous_price > 0):
            raise ValueError("n_shares and previous_price must be > 0")

    @classmethod
    def from_agents(cls, agents: Sequence[AgentState], regime: RegulatoryRegime,
                    n_shares: float, previous_price: float,
                    var_estimates: Sequence[float | None] | None = None, **kw):
        var = None
        if var_estimates is not None:
            var = [np.nan if v is None else v for v in var_estimates]
        return cls(
            log_perceived=[a.log_perceived for a in agents],
            beta=[a.beta for a in agents],
            wealth=[a.wealth for a in agents],
            holdings=[a.holdings for a in agents],
            active=[a.status is Status.ACTIVE for a in agents],
            shorts_allowed=[a.shorts_allowed for a in agents],
            var_estimate=var,
            regime=regime, n_shares=n_shares, previous_price=previous_price, **kw,
        )

    def kernel_args(self):
        can_short = self.shorts_allowed & (not self.regime.ssban)
        var_on = np.isfinite(self.var_estimate) & self.regime.var_limit
        var_est = np.where(var_on, self.var_estimate, 1.0)
        gamma = self.beta / self.gamma_scale * self.regime.tax_level
        return (self.log_perceived, self.beta, self.wealth, self.holdings,
                float(self.previous_price), self.active, can_short, var_on,
                var_est, gamma, float(self.lambda_max), float(self.wealth_floor),
                float(self.n_shares), int(self.mispricing_sign))


@dataclass
class ClearingSolution:
    price: float
    per_agent_demand: np.ndarray
    residual: float
    iterations: int
    at_jump: bool = False
    evaluations: int = field(default=0, repr=False)


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def excess_demand_kernel(price, log_perc, beta, wealth, holdings, p_prev,
                         active, can_short, var_on, var_est, gamma,
                         lambda_max, wealth_floor, n_shares, sign, out):
    total = 0.0
    for i in range(beta.shape[0]):
        d = 0.0
        if active[i]:
            w = wealth[i] + holdings[i] * (price - p_prev)
            if w >= wealth_floor and w > 0.0:
                m = mispricing_kernel(log_perc[i], price, sign)
                d = demand_kernel(m, beta[i], w, price, lambda_max, can_short[i],
                                  var_on[i], var_est[i], gamma[i], holdings[i])
        out[i] = d
        total += d
    return total - n_shares


@njit(cache=True)
def clear_kernel(p_start, log_perc, beta, wealth, holdings, p_prev, active,
                 can_short, var_on, var_est, gamma, lambda_max, wealth_floor,
                 n_shares, sign, tol_abs, price_floor, price_ceiling, out):
    """Returns ``(price, residual, iterations, evaluations, status)``.

    On return ``out`` holds the per-agent demands at ``price``.
    """
    nev = 0
    xa = min(max(p_start, price_floor), price_ceiling)
    fa = excess_demand_kernel(xa, log_perc, beta, wealth, holdings, p_prev, active,
                              can_short, var_on, var_est, gamma, lambda_max,
                              wealth_floor, n_shares, sign, out)
    nev += 1
    if not math.isfinite(fa):
        return xa, fa, 0, nev, NON_FINITE
    if abs(fa) <= tol_abs:
        return xa, fa, 0, nev, OK

    # excess demand > 0 -> price must rise
    direction = 1.0 if fa > 0.0 else -1.0
    step = _FIRST_LOG_STEP
    xb = xa
    fb = fa
    while True:
        xb = xa * math.exp(direction * step)
        if xb > price_ceiling:
            xb = price_ceiling
        if xb < price_floor:
            xb = price_floor
        fb = excess_demand_kernel(xb, log_perc, beta, wealth, holdings, p_prev, active,
                                  can_short, var_on, var_est, gamma, lambda_max,
                                  wealth_floor, n_shares, sign, out)
        nev += 1
        if not math.isfinite(fb):
            return xb, fb, 0, nev, NON_FINITE
        if abs(fb) <= tol_abs:
            return xb, fb, 0, nev, OK
        if (fb > 0.0) != (fa > 0.0):
            break
        if xb == price_ceiling or xb == price_floor:
            return xb, fb, 0, nev, NO_BRACKET
        xa = xb
        fa = fb
        step *= 2.0

    # Brent on [xa, xb]; follows the classic zeroin bookkeeping
    xpre, fpre = xa, fa
    xcur, fcur = xb, fb
    xblk, fblk = 0.0, 0.0
    spre, scur = 0.0, 0.0
    it = 0
    status = JUMP
    while it < _MAX_ITER:
        it += 1
        if fpre != 0.0 and fcur != 0.0 and (fpre > 0.0) != (fcur > 0.0):
            xblk = xpre
            fblk = fpre
            spre = scur = xcur - xpre
        if abs(fblk) < abs(fcur):
            xpre = xcur
            xcur = xblk
            xblk = xpre
            fpre = fcur
            fcur = fblk
            fblk = fpre

        if abs(fcur) <= tol_abs:
            status = OK
            break
        delta = 2.0 * _EPS * abs(xcur)
        sbis = (xblk - xcur) / 2.0
        if abs(sbis) <= delta:
            # bracket collapsed onto a discontinuity
            break

        if abs(spre) > delta and abs(fcur) < abs(fpre):
            if xpre == xblk:
                stry = -fcur * (xcur - xpre) / (fcur - fpre)
            else:
                dpre = (fpre - fcur) / (xpre - xcur)
                dblk = (fblk - fcur) / (xblk - xcur)
                stry = -fcur * (fblk * dblk - fpre * dpre) / (dblk * dpre * (fblk - fpre))
            if 2.0 * abs(stry) < min(abs(spre), 3.0 * abs(sbis) - delta):
                spre = scur
                scur = stry
            else:
                spre = sbis
                scur = sbis
        else:
            spre = sbis
            scur = sbis

        xpre = xcur
        fpre = fcur
        if abs(scur) > delta:
            xcur += scur
        else:
            xcur += delta if sbis > 0 else -delta
        fcur = excess_demand_kernel(xcur, log_perc, beta, wealth, holdings, p_prev,
                                    active, can_short, var_on, var_est, gamma,
                                    lambda_max, wealth_floor, n_shares, sign, out)
        nev += 1
        if not math.isfinite(fcur):
            return xcur, fcur, it, nev, NON_FINITE

    # refill ``out`` at the accepted price (the last evaluation may differ)
    res = excess_demand_kernel(xcur, log_perc, beta, wealth, holdings, p_prev, active,
                               can_short, var_on, var_est, gamma, lambda_max,
                               wealth_floor, n_shares, sign, out)
    nev += 1
    return xcur, res, it, nev, status


# ---------------------------------------------------------------------------
# public API


def aggregate_excess_demand(problem: ClearingProblem, price: float,
                            out: np.ndarray | None = None) -> float:
    """Sum of all demands at ``price`` minus the share supply."""
    if not price > 0:
        raise ValueError("price must be > 0")
    if out is None:
        out = np.empty(len(problem.beta))
    return excess_demand_kernel(float(price), *problem.kernel_args(), out)


def clear_market(problem: ClearingProblem, tolerance: float = SOLVER_TOL,
                 start_price: float | None = None) -> ClearingSolution:
    """Find the clearing price nearest to ``start_price`` (default: previous price).

    Raises :class:`NoBracket` or :class:`NonFinite` on failure.  When the
    root sits on a jump of the excess-demand curve, the side with the smaller
    residual is returned and ``at_jump`` is set.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be > 0")
    out = np.empty(len(problem.beta))
    p0 = problem.previous_price if start_price is None else start_price
    price, res, it, nev, status = clear_kernel(
        float(p0), *problem.kernel_args(), tolerance * problem.n_shares,
        PRICE_FLOOR, PRICE_CEILING, out)
    if status == NO_BRACKET:
        raise NoBracket(f"no sign change of excess demand up to price {price:.6g} "
                        f"(excess {res:.6g})")
    if status == NON_FINITE:
        raise NonFinite(f"non-finite excess demand at price {price!r}")
    return ClearingSolution(price=price, per_agent_demand=out, residual=res,
                            iterations=it, at_jump=status == JUMP, evaluations=nev)
