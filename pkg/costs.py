"""
Penalised stage costs and the probability-weighted ensemble objective.

The cubic penalty is zero inside [l, u] and reaches PENALTY_WEIGHT at a
violation of PENALTY_BAND times the scaled bound. All terms come with first
derivatives so the optimizer can differentiate the objective exactly.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import PENALTY_BAND, PENALTY_EXPONENT, PENALTY_WEIGHT, ControlSettings
from dynamics import Policy, SystemState, Trajectory, simulate
from exceptions import DimensionError, FeedbackSingularityError, PenaltyBoundsError, SimulationError
from grid_model import GenId, Grid
from powerflow import LineFlows

logger = logging.getLogger(__name__)

COST_FIELDS = (
    "gen_cost",
    "gen_limit_pen",
    "ramp_pen",
    "flow_pen",
    "freq_pen",
    "int_freq_pen",
    "energy_pen",
)

PROB_TOL = 1e-12


@dataclass(frozen=True)
class PenaltySpec:
    lower: float
    upper: float
    weight: float = PENALTY_WEIGHT
    band: float = PENALTY_BAND
    exponent: int = PENALTY_EXPONENT

    def __post_init__(self):
        if self.lower > self.upper:
            raise PenaltyBoundsError(f"penalty lower bound {self.lower} exceeds upper bound {self.upper}")

    def __call__(self, a):
        return penalty(a, self.lower, self.upper, weight=self.weight, band=self.band, exponent=self.exponent)


def penalty(
    a, l, u, weight: float = PENALTY_WEIGHT, band: float = PENALTY_BAND, exponent: int = PENALTY_EXPONENT
) -> Tuple[np.ndarray, np.ndarray]:
    """Deadband penalty (cubic by default) and its derivative, elementwise.

    Scalars return 0-d values; bounds broadcast against ``a``. Infinite bounds
    never activate.
    """
    a, l, u = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(l, dtype=float), np.asarray(u, dtype=float)
    )
    if np.any(l > u):
        bad = np.argwhere(l > u)[0] if l.ndim else ()
        raise PenaltyBoundsError(f"penalty lower bound {l[tuple(bad)]} exceeds upper bound {u[tuple(bad)]}")

    value = np.zeros(a.shape)
    slope = np.zeros(a.shape)
    above = a > u
    below = a < l
    if np.any(above):
        scale = band * (np.abs(u[above]) + 1.0)
        x = (a[above] - u[above]) / scale
        value[above] = weight * x**exponent
        slope[above] = exponent * weight * x ** (exponent - 1) / scale
    if np.any(below):
        scale = band * (np.abs(l[below]) + 1.0)
        x = (l[below] - a[below]) / scale
        value[below] = weight * x**exponent
        slope[below] = -exponent * weight * x ** (exponent - 1) / scale
    return value, slope


@dataclass(frozen=True)
class CostBreakdown:
    gen_cost: float = 0.0
    gen_limit_pen: float = 0.0
    ramp_pen: float = 0.0
    flow_pen: float = 0.0
    freq_pen: float = 0.0
    int_freq_pen: float = 0.0
    energy_pen: float = 0.0

    @property
    def total(self) -> float:
        return float(sum(getattr(self, name) for name in COST_FIELDS))

    def to_dict(self) -> Dict[str, float]:
        data = asdict(self)
        data["total"] = self.total
        return data

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(**{name: getattr(self, name) + getattr(other, name) for name in COST_FIELDS})


def _energy_bounds(targets: np.ndarray, band: Tuple[float, float]) -> Tuple[np.ndarray, np.ndarray]:
    lo, hi = band[0] * targets, band[1] * targets
    return np.minimum(lo, hi), np.maximum(lo, hi)


def stage_cost(
    grid: Grid,
    x_t: SystemState,
    x_t1: SystemState,
    omega_t: float,
    Omega_t: float,
    flows_t: LineFlows,
    t: int,
    T: int,
    gen_ids: Optional[Sequence[GenId]] = None,
    settings: Optional[ControlSettings] = None,
) -> CostBreakdown:
    """Cost of moving from x(t) to x(t+1); the energy term joins at t = T-1."""
    settings = settings or ControlSettings()
    gen_ids = tuple(gen_ids) if gen_ids is not None else grid.online_generators
    m = len(gen_ids)
    p = np.asarray(x_t.p_go, dtype=float)
    p_next = np.asarray(x_t1.p_go, dtype=float)
    flows = np.asarray(flows_t.flows, dtype=float)
    if p.shape != (m,) or p_next.shape != (m,):
        raise DimensionError(f"generator outputs must have shape ({m},), got {p.shape} and {p_next.shape}")
    if flows.shape != (grid.n_lines,):
        raise DimensionError(f"flows must have shape ({grid.n_lines},), got {flows.shape}")
    if not 0 <= t < T:
        raise DimensionError(f"stage index {t} outside 0..{T - 1}")

    c1, c2, c3 = (grid.generator_array(name, gen_ids) for name in ("c1", "c2", "c3"))
    limits = grid.thermal_limits
    energy = 0.0
    if t == T - 1:
        lo, hi = _energy_bounds(grid.generator_array("energy_target", gen_ids), settings.energy_band)
        energy = float(penalty(x_t1.p_I, lo, hi)[0].sum())

    return CostBreakdown(
        gen_cost=float(np.sum(c1 * p**2 + c2 * p + c3)),
        gen_limit_pen=float(
            penalty(p, grid.generator_array("p_min", gen_ids), grid.generator_array("p_max", gen_ids))[0].sum()
        ),
        ramp_pen=float(
            penalty(
                (p_next - p) / settings.delta_minutes,
                grid.generator_array("ramp_min", gen_ids),
                grid.generator_array("ramp_max", gen_ids),
            )[0].sum()
        ),
        flow_pen=float(penalty(flows, -limits, limits)[0].sum()),
        freq_pen=float(penalty(omega_t, -settings.freq_band, settings.freq_band)[0]),
        int_freq_pen=float(penalty(Omega_t, -settings.int_freq_band, settings.int_freq_band)[0]),
        energy_pen=energy,
    )


def scenario_cost(grid: Grid, traj: Trajectory) -> Tuple[float, List[CostBreakdown]]:
    settings = traj.settings
    T = traj.horizon
    stages = []
    for t in range(T):
        stages.append(
            stage_cost(
                grid,
                traj.state(t),
                traj.state(t + 1),
                float(traj.omega[t]),
                float(traj.Omega[t]),
                LineFlows(grid=grid, flows=traj.flows[t]),
                t,
                T,
                gen_ids=traj.gen_ids,
                settings=settings,
            )
        )
    return float(sum(stage.total for stage in stages)), stages


def total_breakdown(stages: Sequence[CostBreakdown]) -> CostBreakdown:
    total = CostBreakdown()
    for stage in stages:
        total = total + stage
    return total


@dataclass(eq=False)
class CostPartials:
    """Objective partial derivatives along a trajectory (rows t = 0..T)."""

    omega: np.ndarray
    Omega: np.ndarray
    p_go: np.ndarray
    flows: np.ndarray
    p_I_final: np.ndarray


def scenario_cost_partials(grid: Grid, traj: Trajectory) -> Tuple[float, CostPartials]:
    """Vectorised scenario cost with its partials in omega, Omega, p_go, flows and p_I(T)."""
    settings = traj.settings
    T = traj.horizon
    gen_ids = traj.gen_ids
    delta = settings.delta_minutes
    c1, c2, c3 = (grid.generator_array(name, gen_ids) for name in ("c1", "c2", "c3"))

    P = traj.p_go[:T]
    d_p = np.zeros_like(traj.p_go)
    total = np.sum(c1 * P**2 + c2 * P + c3)
    d_p[:T] += 2.0 * c1 * P + c2

    value, slope = penalty(P, grid.generator_array("p_min", gen_ids), grid.generator_array("p_max", gen_ids))
    total += value.sum()
    d_p[:T] += slope

    ramps = np.diff(traj.p_go, axis=0) / delta
    value, slope = penalty(ramps, grid.generator_array("ramp_min", gen_ids), grid.generator_array("ramp_max", gen_ids))
    total += value.sum()
    d_p[1:] += slope / delta
    d_p[:T] -= slope / delta

    limits = grid.thermal_limits
    d_flows = np.zeros_like(traj.flows)
    value, slope = penalty(traj.flows[:T], -limits, limits)
    total += value.sum()
    d_flows[:T] = slope

    d_omega = np.zeros_like(traj.omega)
    value, slope = penalty(traj.omega[:T], -settings.freq_band, settings.freq_band)
    total += value.sum()
    d_omega[:T] = slope

    d_Omega = np.zeros_like(traj.Omega)
    value, slope = penalty(traj.Omega[:T], -settings.int_freq_band, settings.int_freq_band)
    total += value.sum()
    d_Omega[:T] = slope

    lo, hi = _energy_bounds(grid.generator_array("energy_target", gen_ids), settings.energy_band)
    value, d_energy = penalty(traj.p_I[T], lo, hi)
    total += value.sum()

    return float(total), CostPartials(omega=d_omega, Omega=d_Omega, p_go=d_p, flows=d_flows, p_I_final=d_energy)


def check_probabilities(probs: Sequence[float]) -> None:
    total = float(np.sum(probs))
    if abs(total - 1.0) > PROB_TOL:
        raise DimensionError(f"scenario probabilities sum to {total!r}, expected 1 within {PROB_TOL}")


def ensemble_objective(
    grid: Grid, policy: Policy, ensemble, settings: Optional[ControlSettings] = None
) -> float:
    """Sum of Prob(chi) * scenario cost, reduced in scenario index order."""
    settings = settings or ControlSettings()
    check_probabilities([s.prob for s in ensemble.scenarios])
    total = 0.0
    for scenario in ensemble.scenarios:
        try:
            traj = simulate(grid, policy, scenario, settings)
        except FeedbackSingularityError as exc:
            raise SimulationError(f"scenario {scenario.scenario_id}: {exc}", scenario_id=scenario.scenario_id) from exc
        cost, _ = scenario_cost(grid, traj)
        total += scenario.prob * cost
    return total


def _outside(values: np.ndarray, lower, upper) -> int:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    slack_hi = 1e-9 * np.maximum(np.abs(np.where(np.isfinite(upper), upper, 0.0)), 1.0)
    slack_lo = 1e-9 * np.maximum(np.abs(np.where(np.isfinite(lower), lower, 0.0)), 1.0)
    return int(np.count_nonzero((values > upper + slack_hi) | (values < lower - slack_lo)))


def violation_counts(grid: Grid, traj: Trajectory) -> Dict[str, int]:
    """Entries outside each constraint band over the control stages t = 0..T-1."""
    settings = traj.settings
    T = traj.horizon
    gen_ids = traj.gen_ids
    lo, hi = _energy_bounds(grid.generator_array("energy_target", gen_ids), settings.energy_band)
    return {
        "generation": _outside(
            traj.p_go[:T], grid.generator_array("p_min", gen_ids), grid.generator_array("p_max", gen_ids)
        ),
        "ramp": _outside(
            np.diff(traj.p_go, axis=0) / settings.delta_minutes,
            grid.generator_array("ramp_min", gen_ids),
            grid.generator_array("ramp_max", gen_ids),
        ),
        "thermal": _outside(traj.flows[:T], -grid.thermal_limits, grid.thermal_limits),
        "frequency": _outside(traj.omega[:T], -settings.freq_band, settings.freq_band),
        "integral_frequency": _outside(traj.Omega[:T], -settings.int_freq_band, settings.int_freq_band),
        "energy": _outside(traj.p_I[T], lo, hi),
    }
