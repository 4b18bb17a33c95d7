#!/usr/bin/env python3
"""
Quasi-static closed-loop grid evolution.

Each time step solves frequency deviation, bus angles and generator outputs as
one linear system: global power balance, non-reference bus balances and the
generator feedback laws

    p_go = dispatch(t) + alpha_P * omega + alpha_I * Omega(t) + sum_i alpha_F[g->i] * p_{g->i}

The integral Omega and the delivered energy p_I are then advanced.
"""

import logging
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import brentq

from config import BALANCE_RTOL, ControlSettings
from exceptions import DimensionError, FeedbackSingularityError, GridflexError, SimulationError
from grid_model import GenId, Grid
from powerflow import AngleSolution, LineFlows, powerflow_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeedbackTap:
    """One alpha_F entry: generator column ``gen_index`` observing line ``line``."""

    gen_index: int
    gen_id: GenId
    line: int
    neighbor: int
    sign: float  # +1 when the generator bus is the stored from-bus


def feedback_taps(grid: Grid, gen_ids: Sequence[GenId]) -> Tuple[FeedbackTap, ...]:
    taps = []
    for j, g in enumerate(gen_ids):
        bus = grid.generators[g].bus
        for k in grid.incident_lines(bus):
            ln = grid.lines[k]
            if ln.from_bus == bus:
                taps.append(FeedbackTap(j, g, k, ln.to_bus, 1.0))
            else:
                taps.append(FeedbackTap(j, g, k, ln.from_bus, -1.0))
    return tuple(taps)


@dataclass(eq=False)
class Policy:
    """Dispatch trajectory and feedback gains for the online generators ``gen_ids``."""

    gen_ids: Tuple[GenId, ...]
    dispatch: np.ndarray  # (T+1, m) MW
    alpha_P: np.ndarray  # (m,) MW/Hz
    alpha_I: np.ndarray  # (m,) MW/Hz
    alpha_F: np.ndarray  # (K,) per feedback tap

    @property
    def horizon(self) -> int:
        return self.dispatch.shape[0] - 1

    def copy(self) -> "Policy":
        return Policy(
            gen_ids=tuple(self.gen_ids),
            dispatch=self.dispatch.copy(),
            alpha_P=self.alpha_P.copy(),
            alpha_I=self.alpha_I.copy(),
            alpha_F=self.alpha_F.copy(),
        )

    def validate(self, grid: Grid, horizon: Optional[int] = None) -> None:
        m = len(self.gen_ids)
        problems = []
        if self.dispatch.ndim != 2 or self.dispatch.shape[1] != m:
            problems.append(f"dispatch shape {self.dispatch.shape} does not match {m} generators")
        if horizon is not None and self.dispatch.shape[0] != horizon + 1:
            problems.append(f"dispatch has {self.dispatch.shape[0]} rows, expected {horizon + 1}")
        if self.alpha_P.shape != (m,) or self.alpha_I.shape != (m,):
            problems.append("alpha_P/alpha_I must have one entry per online generator")
        n_taps = len(feedback_taps(grid, self.gen_ids))
        if self.alpha_F.shape != (n_taps,):
            problems.append(f"alpha_F has shape {self.alpha_F.shape}, expected ({n_taps},) incident-line taps")
        if not all(np.all(np.isfinite(a)) for a in (self.alpha_P, self.alpha_I, self.alpha_F)):
            problems.append("gains must be finite")
        if problems:
            raise DimensionError("; ".join(problems))

    @classmethod
    def zeros(cls, grid: Grid, gen_ids: Sequence[GenId], horizon: int) -> "Policy":
        m = len(gen_ids)
        return cls(
            gen_ids=tuple(gen_ids),
            dispatch=np.zeros((horizon + 1, m)),
            alpha_P=np.zeros(m),
            alpha_I=np.zeros(m),
            alpha_F=np.zeros(len(feedback_taps(grid, gen_ids))),
        )


@dataclass(eq=False)
class SystemState:
    Omega: float  # Hz, discounted integral of omega
    p_go: np.ndarray  # MW, latest generator outputs
    p_I: np.ndarray  # MWh, delivered energy
    # observables seen by lagged feedback
    last_omega: float = 0.0
    last_theta: Optional[np.ndarray] = None


class StepResult(NamedTuple):
    next: SystemState
    omega: float
    flows: LineFlows
    theta: AngleSolution


@dataclass(eq=False)
class Trajectory:
    """Closed-loop record for t = 0..T; row t holds quantities solved at step t."""

    gen_ids: Tuple[GenId, ...]
    settings: ControlSettings
    omega: np.ndarray  # (T+1,)
    Omega: np.ndarray  # (T+1,) integral entering step t
    p_go: np.ndarray  # (T+1, m)
    p_I: np.ndarray  # (T+1, m) energy delivered before step t
    theta: np.ndarray  # (T+1, n)
    flows: np.ndarray  # (T+1, L)
    p_load: np.ndarray  # (T+1, n)
    p_R: np.ndarray  # (T+1, n)
    z: np.ndarray  # (T+1, N) stacked step unknowns
    scenario_id: Optional[int] = None
    p_fixed: Optional[np.ndarray] = None  # (T+1, n) output of online units held at dispatch

    @property
    def horizon(self) -> int:
        return len(self.omega) - 1

    def state(self, t: int) -> SystemState:
        return SystemState(Omega=float(self.Omega[t]), p_go=self.p_go[t].copy(), p_I=self.p_I[t].copy())

    @property
    def max_abs_omega(self) -> float:
        return float(np.max(np.abs(self.omega)))


class ClosedLoopSystem:
    """Per-step linear system A z = b for a fixed grid, commitment and gain set.

    Unknowns z = [omega, theta (non-reference buses), p_go]. With lagged
    feedback the generator rows read the previous step's observables from b.
    """

    def __init__(self, grid: Grid, policy: Policy, settings: ControlSettings):
        self.grid = grid
        self.settings = settings
        self.gen_ids = tuple(policy.gen_ids)
        self.taps = feedback_taps(grid, self.gen_ids)
        self.pf = powerflow_model(grid)
        n, m = grid.n_buses, len(self.gen_ids)
        self.n, self.m = n, m
        self.N = n + m
        self.theta_slice = slice(1, n)
        self.gen_slice = slice(n, n + m)
        self.lag = settings.feedback_lag
        self.nominal = grid.nominal_flows if settings.use_nominal_flows else np.zeros(grid.n_lines)
        self.divergence = self.pf.nominal_divergence if settings.use_nominal_flows else np.zeros(n)

        nr = self.pf.non_reference
        self.placement = np.zeros((n, m))
        for j, g in enumerate(self.gen_ids):
            self.placement[grid.generators[g].bus, j] = 1.0

        A0 = np.zeros((self.N, self.N))
        A0[0, 0] = grid.total_beta
        A0[0, self.gen_slice] = 1.0
        A0[1:n, 0] = grid.beta[nr]
        A0[1:n, self.theta_slice] = -self.pf.reduced_laplacian
        A0[1:n, self.gen_slice] = self.placement[nr]
        A0[self.gen_slice, self.gen_slice] = np.eye(m)
        self.A0 = A0

        # tap_rows[k] is d(observed flow of tap k)/d theta_nonref
        self.tap_rows = np.array(
            [tap.sign * self.pf.flow_matrix[tap.line] for tap in self.taps]
        ).reshape(len(self.taps), n - 1)
        self.tap_offsets = np.array([tap.sign * self.nominal[tap.line] for tap in self.taps])
        self.tap_gen = np.array([tap.gen_index for tap in self.taps], dtype=int)

        self.alpha_P = np.asarray(policy.alpha_P, dtype=float)
        self.alpha_I = np.asarray(policy.alpha_I, dtype=float)
        self.alpha_F = np.asarray(policy.alpha_F, dtype=float)
        self.Y, self.y0 = self.observation_matrix(self.alpha_P, self.alpha_F)

        self.A = A0.copy()
        if self.lag == 0:
            self.A[self.gen_slice] -= self.Y
        self._factorize()

    def observation_matrix(self, alpha_P: np.ndarray, alpha_F: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Feedback observation y = Y z + y0 entering the generator rows."""
        Y = np.zeros((self.m, self.N))
        Y[:, 0] = alpha_P
        y0 = np.zeros(self.m)
        if len(self.taps):
            np.add.at(Y[:, self.theta_slice], self.tap_gen, alpha_F[:, None] * self.tap_rows)
            np.add.at(y0, self.tap_gen, alpha_F * self.tap_offsets)
        return Y, y0

    def _offending_gains(self, limit: int = 5) -> Dict[str, float]:
        entries = {f"alpha_P[g{g}]": float(a) for g, a in zip(self.gen_ids, self.alpha_P)}
        for tap, a in zip(self.taps, self.alpha_F):
            entries[f"alpha_F[g{tap.gen_id}->{tap.neighbor}]"] = float(a)
        ranked = sorted(entries.items(), key=lambda item: -abs(item[1]))
        return dict(ranked[:limit])

    def _factorize(self) -> None:
        if not np.all(np.isfinite(self.A)):
            raise FeedbackSingularityError(
                "feedback-induced singularity: non-finite closed-loop matrix",
                condition=float("inf"),
                gains=self._offending_gains(),
            )
        condition = float(np.linalg.cond(self.A))
        if not np.isfinite(condition) or condition > self.settings.condition_limit:
            gains = self._offending_gains()
            raise FeedbackSingularityError(
                f"feedback-induced singularity: closed-loop condition number {condition:.3g} "
                f"exceeds {self.settings.condition_limit:.3g}; largest gains {gains}",
                condition=condition,
                gains=gains,
            )
        self.condition = condition
        self.lu = lu_factor(self.A, check_finite=False)

    def rhs(
        self,
        p_R: np.ndarray,
        p_L0: np.ndarray,
        dispatch: np.ndarray,
        Omega: float,
        z_prev: Optional[np.ndarray] = None,
        p_fixed: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        nr = self.pf.non_reference
        exogenous = np.asarray(p_R, dtype=float) + np.asarray(p_L0, dtype=float)
        if p_fixed is not None:
            exogenous = exogenous + np.asarray(p_fixed, dtype=float)
        b = np.empty(self.N)
        b[0] = -exogenous.sum()
        b[1 : self.n] = -exogenous[nr] + self.divergence[nr]
        gen_rhs = np.asarray(dispatch, dtype=float) + self.alpha_I * Omega + self.y0
        if self.lag:
            previous = np.zeros(self.N) if z_prev is None else z_prev
            gen_rhs = gen_rhs + self.Y @ previous
        b[self.gen_slice] = gen_rhs
        return b

    def solve(self, b: np.ndarray) -> np.ndarray:
        return lu_solve(self.lu, b, check_finite=False)

    def solve_transpose(self, g: np.ndarray) -> np.ndarray:
        return lu_solve(self.lu, g, trans=1, check_finite=False)

    def full_theta(self, z: np.ndarray) -> np.ndarray:
        theta = np.zeros(self.n)
        theta[self.pf.non_reference] = z[self.theta_slice]
        return theta

    def flows(self, z: np.ndarray) -> np.ndarray:
        return self.nominal + self.pf.flow_matrix @ z[self.theta_slice]

    def pack_state(self, omega: float, theta: Optional[np.ndarray]) -> np.ndarray:
        """Previous-step unknown vector as seen by lagged feedback (p_go irrelevant)."""
        z = np.zeros(self.N)
        z[0] = omega
        if theta is not None:
            z[self.theta_slice] = np.asarray(theta)[self.pf.non_reference]
        return z


def _check_power_balance(
    grid: Grid, system: ClosedLoopSystem, z: np.ndarray, p_R, p_L0, t: int, p_fixed=None
) -> None:
    generation = z[system.gen_slice]
    load = np.asarray(p_L0) + grid.beta * z[0]
    fixed = np.zeros(grid.n_buses) if p_fixed is None else np.asarray(p_fixed, dtype=float)
    total = float(generation.sum() + load.sum() + np.sum(p_R) + fixed.sum())
    scale = float(np.abs(generation).sum() + np.abs(load).sum() + np.abs(p_R).sum() + np.abs(fixed).sum())
    if abs(total) > BALANCE_RTOL * max(scale, 1.0):
        raise SimulationError(f"power balance violated by {total:.3g} MW after solve", t=t)


def step(
    grid: Grid,
    policy: Policy,
    state: SystemState,
    p_R_t: np.ndarray,
    p_L0_t: np.ndarray,
    t: int,
    settings: Optional[ControlSettings] = None,
    system: Optional[ClosedLoopSystem] = None,
    p_fixed_t: Optional[np.ndarray] = None,
) -> StepResult:
    """Solve the closed loop at time index ``t`` and advance the state.

    ``p_fixed_t`` holds per-bus output of online units outside the policy.
    """
    settings = settings or ControlSettings()
    system = system or ClosedLoopSystem(grid, policy, settings)
    if not 0 <= t < policy.dispatch.shape[0]:
        raise DimensionError(f"time index {t} outside dispatch horizon 0..{policy.dispatch.shape[0] - 1}")
    if np.shape(p_R_t) != (grid.n_buses,) or np.shape(p_L0_t) != (grid.n_buses,):
        raise DimensionError("renewable and load vectors must have one entry per bus")
    if p_fixed_t is not None and np.shape(p_fixed_t) != (grid.n_buses,):
        raise DimensionError("fixed injections must have one entry per bus")
    if np.shape(state.p_I) != (system.m,):
        raise DimensionError(f"state p_I has shape {np.shape(state.p_I)}, expected ({system.m},)")

    z_prev = system.pack_state(state.last_omega, state.last_theta) if system.lag else None
    b = system.rhs(p_R_t, p_L0_t, policy.dispatch[t], state.Omega, z_prev, p_fixed_t)
    z = system.solve(b)
    _check_power_balance(grid, system, z, p_R_t, p_L0_t, t, p_fixed_t)

    omega = float(z[0])
    theta = system.full_theta(z)
    p_go = z[system.gen_slice].copy()
    nxt = SystemState(
        Omega=omega + settings.gamma * state.Omega,
        p_go=p_go,
        p_I=np.asarray(state.p_I, dtype=float) + p_go * settings.delta_minutes / 60.0,
        last_omega=omega,
        last_theta=theta,
    )
    return StepResult(
        next=nxt,
        omega=omega,
        flows=LineFlows(grid=grid, flows=system.flows(z)),
        theta=AngleSolution(theta=theta),
    )


def simulate(
    grid: Grid,
    policy: Policy,
    scenario,
    settings: Optional[ControlSettings] = None,
    system: Optional[ClosedLoopSystem] = None,
) -> Trajectory:
    """Fold ``step`` over t = 0..T from Omega(0) = 0, p_I(0) = 0."""
    settings = settings or ControlSettings()
    T = scenario.horizon
    if policy.dispatch.shape[0] != T + 1:
        raise DimensionError(f"policy horizon {policy.horizon} does not match scenario horizon {T}")
    if tuple(scenario.commitment) != tuple(policy.gen_ids):
        raise DimensionError(
            f"scenario commitment {tuple(scenario.commitment)} does not match policy generators {tuple(policy.gen_ids)}"
        )
    policy.validate(grid, T)
    system = system or ClosedLoopSystem(grid, policy, settings)
    p_fixed = getattr(scenario, "p_fixed", None)
    p_fixed = np.zeros((T + 1, grid.n_buses)) if p_fixed is None else np.asarray(p_fixed, dtype=float)
    if p_fixed.shape != (T + 1, grid.n_buses):
        raise DimensionError(f"fixed injections have shape {p_fixed.shape}, expected {(T + 1, grid.n_buses)}")

    n, m, L = grid.n_buses, system.m, grid.n_lines
    omega = np.zeros(T + 1)
    Omega = np.zeros(T + 1)
    p_go = np.zeros((T + 1, m))
    p_I = np.zeros((T + 1, m))
    theta = np.zeros((T + 1, n))
    flows = np.zeros((T + 1, L))
    z_all = np.zeros((T + 1, system.N))

    state = SystemState(Omega=0.0, p_go=policy.dispatch[0].copy(), p_I=np.zeros(m))
    for t in range(T + 1):
        try:
            result = step(grid, policy, state, scenario.p_R[t], scenario.p_L0[t], t, settings, system, p_fixed[t])
        except GridflexError as exc:
            raise SimulationError(f"scenario {scenario.scenario_id}, t={t}: {exc}", t=t, scenario_id=scenario.scenario_id)
        omega[t] = result.omega
        Omega[t] = state.Omega
        p_go[t] = result.next.p_go
        p_I[t] = state.p_I
        theta[t] = result.theta.theta
        flows[t] = result.flows.flows
        z_all[t, 0] = result.omega
        z_all[t, system.theta_slice] = result.theta.theta[system.pf.non_reference]
        z_all[t, system.gen_slice] = result.next.p_go
        state = result.next

    p_load = scenario.p_L0 + omega[:, None] * grid.beta[None, :]
    return Trajectory(
        gen_ids=tuple(policy.gen_ids),
        settings=settings,
        omega=omega,
        Omega=Omega,
        p_go=p_go,
        p_I=p_I,
        theta=theta,
        flows=flows,
        p_load=p_load,
        p_R=np.asarray(scenario.p_R, dtype=float),
        z=z_all,
        scenario_id=scenario.scenario_id,
        p_fixed=p_fixed,
    )


def final_energy(traj: Trajectory) -> np.ndarray:
    """p_I(T): energy delivered over steps 0..T-1."""
    return traj.p_I[-1]


# ---------------------------------------------------------------------------
# Base dispatch


def economic_dispatch(grid: Grid, gen_ids: Sequence[GenId], demand: float) -> np.ndarray:
    """Equal-incremental-cost dispatch of ``demand`` MW with capacity clipping."""
    c1 = grid.generator_array("c1", gen_ids)
    c2 = grid.generator_array("c2", gen_ids)
    p_min = grid.generator_array("p_min", gen_ids)
    p_max = grid.generator_array("p_max", gen_ids)

    if demand <= p_min.sum():
        if demand < p_min.sum():
            logger.warning(f"Demand {demand:.2f} MW below total minimum output; dispatching at p_min")
        return p_min.copy()
    if demand >= p_max.sum():
        if demand > p_max.sum():
            logger.warning(f"Demand {demand:.2f} MW above online capacity; dispatching at p_max")
        return p_max.copy()

    if np.any(c1 <= 0):
        headroom = p_max - p_min
        return p_min + (demand - p_min.sum()) * headroom / headroom.sum()

    def output(lam: float) -> np.ndarray:
        return np.clip((lam - c2) / (2.0 * c1), p_min, p_max)

    lo = float(np.min(2.0 * c1 * p_min + c2)) - 1.0
    hi = float(np.max(2.0 * c1 * p_max + c2)) + 1.0
    lam = brentq(lambda x: output(x).sum() - demand, lo, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps)
    p = output(lam)
    # put the rounding residual on the unit with most headroom
    residual = demand - p.sum()
    room = (p_max - p) if residual > 0 else (p - p_min)
    p[int(np.argmax(room))] += residual
    return p


def forecast_dispatch(
    grid: Grid,
    gen_ids: Sequence[GenId],
    p_R: np.ndarray,
    p_L0: np.ndarray,
    p_fixed: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Balanced economic dispatch for every row of a forecast, net of fixed units."""
    demand = -(np.asarray(p_R).sum(axis=1) + np.asarray(p_L0).sum(axis=1))
    if p_fixed is not None:
        demand = demand - np.asarray(p_fixed).sum(axis=1)
    return np.vstack([economic_dispatch(grid, gen_ids, float(d)) for d in demand])


# ---------------------------------------------------------------------------
# Export


def trajectory_to_frame(grid: Grid, traj: Trajectory) -> pd.DataFrame:
    """Long table: one row per (t, element, quantity)."""
    T1 = traj.horizon + 1
    frames = []

    def block(element: str, ids: Sequence[int], quantity: str, values: np.ndarray) -> pd.DataFrame:
        values = np.asarray(values).reshape(T1, -1)
        return pd.DataFrame(
            {
                "t": np.repeat(np.arange(T1), len(ids)),
                "element": element,
                "element_id": np.tile(np.asarray(ids, dtype=int), T1),
                "quantity": quantity,
                "value": values.ravel(),
            }
        )

    frames.append(block("system", [0], "omega_hz", traj.omega))
    frames.append(block("system", [0], "Omega", traj.Omega))
    buses = list(range(grid.n_buses))
    frames.append(block("bus", buses, "theta_rad", traj.theta))
    frames.append(block("bus", buses, "p_load_mw", traj.p_load))
    frames.append(block("bus", buses, "p_renewable_mw", traj.p_R))
    if traj.p_fixed is not None:
        frames.append(block("bus", buses, "p_fixed_mw", traj.p_fixed))
    frames.append(block("line", list(range(grid.n_lines)), "flow_mw", traj.flows))
    frames.append(block("gen", list(traj.gen_ids), "p_go_mw", traj.p_go))
    frames.append(block("gen", list(traj.gen_ids), "p_I_mwh", traj.p_I))
    return pd.concat(frames, ignore_index=True)


def trajectory_summary(traj: Trajectory, breakdown: Optional[Dict[str, float]] = None) -> Dict:
    summary = {
        "scenario_id": traj.scenario_id,
        "omega_hz": [float(w) for w in traj.omega],
        "max_abs_omega_hz": traj.max_abs_omega,
        "max_abs_Omega": float(np.max(np.abs(traj.Omega))),
    }
    if breakdown is not None:
        summary["cost"] = breakdown
    return summary
