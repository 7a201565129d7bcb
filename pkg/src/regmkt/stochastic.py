"""Seeded shocks and the mean-reverting perception process.

Shocks are drawn from a Philox counter-based generator keyed by
``(master_seed, run_index, purpose)``, so any run's stream can be produced
independently of every other run.  That is what makes common random numbers
across regimes and order-independent parallel execution possible.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

PERCEPTION = 0
BOOTSTRAP = 1
SYNTHETIC = 2


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.025
    corr: float = 0.4
    n_agents: int = 150

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        lo = -1.0 / (self.n_agents - 1) if self.n_agents > 1 else -math.inf
        # corr == 1 is the degenerate common-factor case, allowed for testing
        if not lo < self.corr <= 1:
            raise ValueError(f"corr must lie in ({lo:.6g}, 1]")


@dataclass(frozen=True)
class RngState:
    master_seed: int
    run_index: int = 0
    purpose: int = PERCEPTION

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.master_seed,
                                    spawn_key=(self.run_index, self.purpose))
        return np.random.Generator(np.random.Philox(ss))


def epsilon_from_normals(z: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Map standard normals ``z[..., 0]`` (common) and ``z[..., 1:]`` to shocks."""
    c = spec.corr
    return spec.sigma * (math.sqrt(c) * z[..., :1] + math.sqrt(1.0 - c) * z[..., 1:])


def sample_epsilon(spec: NoiseSpec, rng: RngState | np.random.Generator,
                   size: int | None = None) -> np.ndarray:
    """Equicorrelated normal shocks: marginal sd ``sigma``, pairwise corr ``corr``.

    Returns shape ``(n_agents,)`` or ``(size, n_agents)``.
    """
    gen = rng.generator() if isinstance(rng, RngState) else rng
    shape = (spec.n_agents + 1,) if size is None else (size, spec.n_agents + 1)
    return epsilon_from_normals(gen.standard_normal(shape), spec)


def shock_matrix(spec: NoiseSpec, master_seed: int, run_index: int,
                 n_steps: int) -> np.ndarray:
    """The full ``(n_steps, n_agents)`` perception shock stream of one run."""
    return sample_epsilon(spec, RngState(master_seed, run_index, PERCEPTION), size=n_steps)


def stream_hash(shocks: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(shocks, dtype=np.float64).tobytes()).hexdigest()


def update_perceptions(log_percs, rho: float, log_v: float, eps):
    """One step of the discrete Ornstein-Uhlenbeck process in log space."""
    log_percs = np.asarray(log_percs, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if log_percs.shape != eps.shape:
        raise ValueError("log_percs and eps must have the same shape")
    return rho * log_percs + (1.0 - rho) * log_v + eps


def stationary_sd(sigma: float, rho: float) -> float:
    return sigma / math.sqrt(1.0 - rho * rho)
