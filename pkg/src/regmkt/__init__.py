"""Agent-based stock market with leverage, short-selling bans, VaR limits and a Tobin tax."""

__version__ = "0.1.0"

from .model import Calibration, RegulatoryRegime  # noqa: E402
from .engine import RunConfig, RunResult, run  # noqa: E402

__all__ = ["Calibration", "RegulatoryRegime", "RunConfig", "RunResult", "run", "__version__"]
