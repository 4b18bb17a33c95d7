"""
Configuration settings for the gridflex control-synthesis toolkit.

Every constant can be overridden from the environment (or a local .env file).
"""

import logging
import os
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

load_dotenv()


def _env_float(name: str, default: float) -> float:
    value = os.getenv(name)
    return float(value) if value not in (None, "") else default


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


def _env_bool(name: str, default: bool) -> bool:
    value = os.getenv(name)
    if value in (None, ""):
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


# Time discretisation
DELTA_MINUTES = _env_float("GRIDFLEX_DELTA_MINUTES", 5.0)  # 5-minute data resolution
HORIZON_STEPS = _env_int("GRIDFLEX_HORIZON_STEPS", 12)  # one-hour control period
GAMMA = _env_float("GRIDFLEX_GAMMA", 0.9)  # discount of the frequency integral

# Closed-loop model
USE_NOMINAL_FLOWS = _env_bool("GRIDFLEX_USE_NOMINAL_FLOWS", True)
FEEDBACK_LAG = _env_int("GRIDFLEX_FEEDBACK_LAG", 0)  # 0 contemporaneous, 1 lagged
CONDITION_LIMIT = _env_float("GRIDFLEX_CONDITION_LIMIT", 1e12)
BALANCE_RTOL = 1e-9

# Penalty kernel
PENALTY_WEIGHT = 1e7
PENALTY_BAND = 0.1
PENALTY_EXPONENT = 3

# Operating bands
FREQ_BAND_HZ = _env_float("GRIDFLEX_FREQ_BAND_HZ", 0.01)
INT_FREQ_BAND = _env_float("GRIDFLEX_INT_FREQ_BAND", 0.01)
ENERGY_BAND = (0.95, 1.05)

# Optimizer
LBFGS_HISTORY = _env_int("GRIDFLEX_LBFGS_HISTORY", 10)
OPT_TOL = _env_float("GRIDFLEX_OPT_TOL", 1e-5)  # projected |g|inf in scaled coordinates
OPT_MAX_ITER = _env_int("GRIDFLEX_OPT_MAX_ITER", 500)
OPT_FTOL = _env_float("GRIDFLEX_OPT_FTOL", 1e-12)  # relative objective reduction stop
DROOP_MULTIPLE = _env_float("GRIDFLEX_DROOP_MULTIPLE", 10.0)

# Scenario defaults
DEFAULT_SEED = _env_int("GRIDFLEX_SEED", 2013)
DEFAULT_TRAIN_COUNT = 8
DEFAULT_SCENARIO_COUNT = 26

# Logging
LOG_LEVEL = os.getenv("GRIDFLEX_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILE = os.getenv("GRIDFLEX_LOG_FILE", "")


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Configure root logging once for command-line use."""
    handlers = [logging.StreamHandler()]
    target = log_file if log_file is not None else LOG_FILE
    if target:
        handlers.append(logging.FileHandler(target))
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def _from_mapping(cls, data: Optional[Dict[str, Any]], base):
    if not data:
        return base
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} keys: {sorted(unknown)}")
    values = dict(data)
    if "energy_band" in values:
        values["energy_band"] = tuple(values["energy_band"])
    return replace(base, **values)


@dataclass(frozen=True)
class ControlSettings:
    """Discretisation and closed-loop model switches shared by simulation and costs."""

    delta_minutes: float = DELTA_MINUTES
    horizon: int = HORIZON_STEPS
    gamma: float = GAMMA
    use_nominal_flows: bool = USE_NOMINAL_FLOWS
    feedback_lag: int = FEEDBACK_LAG
    condition_limit: float = CONDITION_LIMIT
    freq_band: float = FREQ_BAND_HZ
    int_freq_band: float = INT_FREQ_BAND
    energy_band: Tuple[float, float] = ENERGY_BAND

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.delta_minutes <= 0:
            raise ValueError(f"delta_minutes must be positive, got {self.delta_minutes}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least one step, got {self.horizon}")
        if self.feedback_lag not in (0, 1):
            raise ValueError(f"feedback_lag must be 0 or 1, got {self.feedback_lag}")

    @property
    def horizon_hours(self) -> float:
        return self.horizon * self.delta_minutes / 60.0

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ControlSettings":
        return _from_mapping(cls, data, cls())


@dataclass(frozen=True)
class OptimizerSettings:
    """Limited-memory quasi-Newton settings."""

    history: int = LBFGS_HISTORY
    tol: float = OPT_TOL
    max_iter: int = OPT_MAX_ITER
    ftol: float = OPT_FTOL
    mode: str = "adjoint"

    def __post_init__(self):
        if self.mode not in ("adjoint", "forward"):
            raise ValueError(f"mode must be 'adjoint' or 'forward', got {self.mode!r}")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "OptimizerSettings":
        return _from_mapping(cls, data, cls())
