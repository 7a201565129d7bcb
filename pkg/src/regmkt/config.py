"""INI-style configuration files.

Sections and keys::

    [calibration]   any Calibration field
    [regime]        ssban, var_limit, tax_level
    [experiment]    n_runs, tax_levels (comma separated), master_seed, parallelism
    [output]        directory, trajectories
    [switches]      mispricing_sign (value|price), tax_deduction,
                    return_convention (log|simple), burn_in

Every key is optional; defaults are the reference calibration.  Unknown
sections or keys are errors.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .experiments import DEFAULT_TAX_LEVELS, ExperimentPlan
from .model import Calibration, ConfigError, RegulatoryRegime

_INT_FIELDS = {"n_agents", "default_timeout", "n_timesteps"}


@dataclass
class SimulationConfig:
    calibration: Calibration = field(default_factory=Calibration)
    regime: RegulatoryRegime = field(default_factory=RegulatoryRegime)
    n_runs: int = 100
    tax_levels: tuple[float, ...] = DEFAULT_TAX_LEVELS
    master_seed: int | None = None
    parallelism: int = 1
    directory: str = "out"
    trajectories: bool = True
    mispricing_sign: str = "value"
    tax_deduction: bool = False
    return_convention: str = "log"
    burn_in: int = 0

    @property
    def sign(self) -> int:
        return 1 if self.mispricing_sign == "value" else -1

    def plan(self, seed: int) -> ExperimentPlan:
        return ExperimentPlan(calibration=self.calibration, tax_levels=self.tax_levels,
                              n_runs=self.n_runs, master_seed=seed, jobs=self.parallelism,
                              tax_deduction=self.tax_deduction,
                              mispricing_sign=self.sign,
                              return_convention=self.return_convention,
                              burn_in=self.burn_in)

    def canonical(self) -> dict:
        d = asdict(self)
        d["tax_levels"] = list(self.tax_levels)
        d.pop("directory")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return no
        elif current == section and key is not None:
            name = line.split("=", 1)[0].split(":", 1)[0].strip()
            if name == key:
                return no
    return None


def _err(text, path, section, key, msg):
    line = _line_of(text, section, key)
    where = f"{path}:{line}: " if line else f"{path}: "
    name = f"{section}.{key}" if key else section
    return ConfigError(name, f"{msg} ({where.rstrip(': ')})")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_SCHEMA = {
    "calibration": {name: (int if name in _INT_FIELDS else float)
                    for name in Calibration.field_names()},
    "regime": {"ssban": _bool, "var_limit": _bool, "tax_level": float},
    "experiment": {"n_runs": int, "master_seed": int, "parallelism": int,
                   "tax_levels": lambda s: tuple(float(x) for x in s.split(",") if x.strip())},
    "output": {"directory": str, "trajectories": _bool},
    "switches": {"mispricing_sign": str, "tax_deduction": _bool,
                 "return_convention": str, "burn_in": int},
}


def parse_config(text: str, path: str = "<config>") -> SimulationConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError("syntax", str(exc)) from exc

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise _err(text, path, section, None, "unknown section")
        values[section] = {}
        for key, raw in parser.items(section):
            conv = _SCHEMA[section].get(key)
            if conv is None:
                raise _err(text, path, section, key, "unknown key")
            try:
                values[section][key] = conv(raw)
            except ValueError as exc:
                raise _err(text, path, section, key, f"invalid value {raw!r}: {exc}") from exc

    def build(section, fn, **kw):
        try:
            return fn(**kw)
        except ConfigError as exc:
            raise _err(text, path, section, exc.field, str(exc).split(": ", 1)[-1]) from exc

    cal = build("calibration", Calibration, **values.get("calibration", {}))
    regime = build("regime", RegulatoryRegime, **values.get("regime", {}))
    cfg = SimulationConfig(calibration=cal, regime=regime)
    flat = {**values.get("experiment", {}), **values.get("output", {}),
            **values.get("switches", {})}
    cfg = replace(cfg, **flat)
    validate(cfg, text, path)
    return cfg


def validate(cfg: SimulationConfig, text: str = "", path: str = "<config>") -> None:
    checks = [
        ("experiment", "n_runs", cfg.n_runs >= 1, "must be >= 1"),
        ("experiment", "parallelism", cfg.parallelism >= 1, "must be >= 1"),
        ("experiment", "tax_levels", all(x >= 0 for x in cfg.tax_levels) and cfg.tax_levels,
         "must be a non-empty list of non-negative rates"),
        ("switches", "mispricing_sign", cfg.mispricing_sign in ("value", "price"),
         "must be 'value' or 'price'"),
        ("switches", "return_convention", cfg.return_convention in ("log", "simple"),
         "must be 'log' or 'simple'"),
        ("switches", "burn_in", cfg.burn_in >= 0, "must be >= 0"),
    ]
    for section, key, ok, msg in checks:
        if not ok:
            raise _err(text, path, section, key, msg)


def load_config(path: str | Path | None) -> SimulationConfig:
    if path is None:
        return SimulationConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {p}: {exc}") from exc
    return parse_config(text, str(p))
