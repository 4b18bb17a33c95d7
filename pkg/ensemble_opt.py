#!/usr/bin/env python3
"""
Policy synthesis over a scenario ensemble.

Parameters of a control scheme are packed into one scaled vector, the
ensemble objective is differentiated exactly through every per-step linear
solve (adjoint or forward accumulation), and L-BFGS-B minimises it pass by
pass.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import Bounds, minimize

from config import DROOP_MULTIPLE, ControlSettings, OptimizerSettings
from costs import check_probabilities, scenario_cost_partials
from dynamics import ClosedLoopSystem, Policy, Trajectory, feedback_taps, forecast_dispatch, simulate
from exceptions import (
    DimensionError,
    FeedbackSingularityError,
    LineSearchError,
    NonFiniteObjectiveError,
    OptimizationError,
    SimulationError,
)
from grid_model import GenId, Grid

logger = logging.getLogger(__name__)


class Block(str, Enum):
    DISPATCH = "dispatch"
    ALPHA_P = "alpha_P"
    ALPHA_I = "alpha_I"
    ALPHA_F = "alpha_F"


BLOCK_ORDER = (Block.DISPATCH, Block.ALPHA_P, Block.ALPHA_I, Block.ALPHA_F)


class Scheme(str, Enum):
    PI = "pi"
    FLOW_PI_UNCOORD = "flow-pi-uncoord"
    FLOW_PI_COORD = "flow-pi-coord"
    FLOW_P = "flow-p"


@dataclass(frozen=True)
class OptPass:
    """One optimisation pass: ``free`` blocks move, ``zeroed`` blocks are pinned to 0."""

    free: Tuple[Block, ...]
    zeroed: Tuple[Block, ...] = ()

    def __post_init__(self):
        overlap = set(self.free) & set(self.zeroed)
        if overlap:
            raise ValueError(f"blocks {sorted(b.value for b in overlap)} cannot be free and zeroed")
        if not self.free:
            raise ValueError("an optimisation pass needs at least one free block")


@dataclass(frozen=True)
class SchemeSpec:
    passes: Tuple[OptPass, ...]
    scheme: Optional[Scheme] = None

    @property
    def name(self) -> str:
        return self.scheme.value if self.scheme is not None else "custom"

    @classmethod
    def custom(cls, free: Sequence[Block], zeroed: Sequence[Block] = ()) -> "SchemeSpec":
        return cls(passes=(OptPass(tuple(free), tuple(zeroed)),))


PI_BLOCKS = (Block.DISPATCH, Block.ALPHA_P, Block.ALPHA_I)


def scheme_spec(scheme) -> SchemeSpec:
    scheme = Scheme(scheme)
    pi_pass = OptPass(PI_BLOCKS, (Block.ALPHA_F,))
    if scheme is Scheme.PI:
        passes = (pi_pass,)
    elif scheme is Scheme.FLOW_P:
        passes = (
            OptPass((Block.DISPATCH, Block.ALPHA_P), (Block.ALPHA_I, Block.ALPHA_F)),
            OptPass((Block.DISPATCH, Block.ALPHA_P, Block.ALPHA_F), (Block.ALPHA_I,)),
        )
    elif scheme is Scheme.FLOW_PI_COORD:
        # joint pass warm-started at the PI optimum, so it never ends above PI
        passes = (pi_pass, OptPass(BLOCK_ORDER))
    else:
        # flow feedback tuned afterwards with the PI parameters frozen
        passes = (pi_pass, OptPass((Block.ALPHA_F,)))
    return SchemeSpec(passes=passes, scheme=scheme)


ALL_SCHEMES = (Scheme.PI, Scheme.FLOW_PI_UNCOORD, Scheme.FLOW_PI_COORD, Scheme.FLOW_P)


# ---------------------------------------------------------------------------
# Parameter packing


def _power_of_two(x: np.ndarray) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=float))
    x = np.where(x > 0, x, 1.0)
    return np.exp2(np.round(np.log2(x)))


def block_scales(grid: Optional[Grid], policy: Policy) -> Dict[Block, np.ndarray]:
    """Per-entry normalisation; powers of two so scaling is exact."""
    m = len(policy.gen_ids)
    if grid is None:
        return {
            Block.DISPATCH: np.ones(policy.dispatch.shape),
            Block.ALPHA_P: np.ones(m),
            Block.ALPHA_I: np.ones(m),
            Block.ALPHA_F: np.ones(policy.alpha_F.shape),
        }
    capacity = _power_of_two(grid.generator_array("p_max", policy.gen_ids))
    gain = float(_power_of_two(np.sum(np.abs(grid.beta))))
    # alpha_F * line limit on the scale of alpha_P * 1 Hz
    tap_limits = np.array([grid.lines[tap.line].thermal_limit for tap in feedback_taps(grid, policy.gen_ids)])
    return {
        Block.DISPATCH: np.broadcast_to(capacity, policy.dispatch.shape).copy(),
        Block.ALPHA_P: np.full(m, gain),
        Block.ALPHA_I: np.full(m, gain),
        Block.ALPHA_F: _power_of_two(gain / tap_limits) if len(tap_limits) else np.ones(0),
    }


@dataclass(frozen=True)
class BlockSlot:
    block: Block
    offset: int
    shape: Tuple[int, ...]
    scale: np.ndarray = field(compare=False)

    @property
    def length(self) -> int:
        return int(np.prod(self.shape, dtype=int))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(eq=False)
class ParamVector:
    values: np.ndarray
    layout: Tuple[BlockSlot, ...]
    zeroed: Tuple[Block, ...] = ()

    def __len__(self) -> int:
        return len(self.values)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        values = np.asarray(values, dtype=float)
        if values.shape != self.values.shape:
            raise DimensionError(f"parameter vector has shape {values.shape}, expected {self.values.shape}")
        return ParamVector(values=values.copy(), layout=self.layout, zeroed=self.zeroed)

    def slot(self, block: Block) -> BlockSlot:
        for slot in self.layout:
            if slot.block is block:
                return slot
        raise KeyError(block)


def _block_value(policy: Policy, block: Block) -> np.ndarray:
    return {
        Block.DISPATCH: policy.dispatch,
        Block.ALPHA_P: policy.alpha_P,
        Block.ALPHA_I: policy.alpha_I,
        Block.ALPHA_F: policy.alpha_F,
    }[block]


def pack(policy: Policy, spec: SchemeSpec, grid: Optional[Grid] = None, pass_index: int = 0) -> ParamVector:
    """Scaled vector of the free blocks of pass ``pass_index``, in block order."""
    opt_pass = spec.passes[pass_index]
    scales = block_scales(grid, policy)
    layout, chunks, offset = [], [], 0
    for block in BLOCK_ORDER:
        if block not in opt_pass.free:
            continue
        raw = np.asarray(_block_value(policy, block), dtype=float)
        slot = BlockSlot(block=block, offset=offset, shape=raw.shape, scale=scales[block].ravel())
        layout.append(slot)
        chunks.append(raw.ravel() / slot.scale)
        offset += slot.length
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(values=values, layout=tuple(layout), zeroed=tuple(opt_pass.zeroed))


def parameter_bounds(grid: Optional[Grid], policy: Policy, v: ParamVector) -> Bounds:
    """Box bounds in scaled coordinates.

    Frequency gains of units with a droop R stay in [-p_max / (R f0), 0];
    every other entry is free.
    """
    lower = np.full(len(v), -np.inf)
    upper = np.full(len(v), np.inf)
    if grid is not None:
        for slot in v.layout:
            if slot.block is not Block.ALPHA_P:
                continue
            floor = np.array([grid.generators[g].droop_floor for g in policy.gen_ids])
            limited = np.isfinite(floor)
            lower[slot.slice] = np.where(limited, floor / slot.scale, -np.inf)
            upper[slot.slice] = np.where(limited, 0.0, np.inf)
    return Bounds(lower, upper)


def unpack(v: ParamVector, spec: SchemeSpec, base: Policy) -> Policy:
    """Policy with free blocks from ``v``, zeroed blocks 0 and the rest from ``base``."""
    expected = sum(slot.length for slot in v.layout)
    if len(v.values) != expected:
        raise DimensionError(f"parameter vector has {len(v.values)} entries, layout needs {expected}")
    blocks = {block: np.array(_block_value(base, block), dtype=float) for block in BLOCK_ORDER}
    for slot in v.layout:
        if blocks[slot.block].shape != slot.shape:
            raise DimensionError(
                f"{slot.block.value} block has shape {slot.shape}, base policy has {blocks[slot.block].shape}"
            )
        blocks[slot.block] = (v.values[slot.slice] * slot.scale).reshape(slot.shape)
    for block in v.zeroed:
        blocks[block] = np.zeros_like(blocks[block])
    return Policy(
        gen_ids=tuple(base.gen_ids),
        dispatch=blocks[Block.DISPATCH],
        alpha_P=blocks[Block.ALPHA_P],
        alpha_I=blocks[Block.ALPHA_I],
        alpha_F=blocks[Block.ALPHA_F],
    )


# ---------------------------------------------------------------------------
# Objective and exact gradient


@dataclass(eq=False)
class PolicyGradient:
    dispatch: np.ndarray
    alpha_P: np.ndarray
    alpha_I: np.ndarray
    alpha_F: np.ndarray

    @classmethod
    def zeros_like(cls, policy: Policy) -> "PolicyGradient":
        return cls(
            dispatch=np.zeros_like(policy.dispatch, dtype=float),
            alpha_P=np.zeros(len(policy.alpha_P)),
            alpha_I=np.zeros(len(policy.alpha_I)),
            alpha_F=np.zeros(len(policy.alpha_F)),
        )

    def block(self, block: Block) -> np.ndarray:
        return getattr(self, block.value)

    def add(self, other: "PolicyGradient", weight: float) -> None:
        for block in BLOCK_ORDER:
            self.block(block)[...] += weight * other.block(block)


def _direct_z_partials(system: ClosedLoopSystem, traj: Trajectory, partials) -> np.ndarray:
    """df/dz_t holding every other step fixed, including the p_I(T) term."""
    T = traj.horizon
    gz = np.zeros((T + 1, system.N))
    gz[:, 0] = partials.omega
    gz[:, system.theta_slice] = partials.flows @ system.pf.flow_matrix
    gz[:, system.gen_slice] = partials.p_go
    gz[:T, system.gen_slice] += partials.p_I_final * traj.settings.delta_minutes / 60.0
    return gz


def _observed_feedback(system: ClosedLoopSystem, traj: Trajectory) -> Tuple[np.ndarray, np.ndarray]:
    """Observables multiplying alpha_P and alpha_F at each step (omega and tap flows)."""
    T1 = traj.horizon + 1
    if system.lag:
        omega = np.concatenate([[0.0], traj.omega[:-1]])
        theta_nr = np.vstack([np.zeros((1, system.n - 1)), traj.z[:-1, system.theta_slice]])
    else:
        omega = traj.omega.copy()
        theta_nr = traj.z[:, system.theta_slice]
    taps = theta_nr @ system.tap_rows.T + system.tap_offsets[None, :] if len(system.taps) else np.zeros((T1, 0))
    return omega, taps


def _adjoint_gradient(system: ClosedLoopSystem, traj: Trajectory, partials, policy: Policy) -> PolicyGradient:
    T = traj.horizon
    gamma = traj.settings.gamma
    gz_direct = _direct_z_partials(system, traj, partials)
    mu_gen = np.zeros((T + 1, system.m))

    lam_Omega_next = 0.0
    mu_next_gen = np.zeros(system.m)
    for t in range(T, -1, -1):
        gz = gz_direct[t].copy()
        gz[0] += lam_Omega_next
        if system.lag and t < T:
            gz += system.Y.T @ mu_next_gen
        mu = system.solve_transpose(gz)
        mu_gen[t] = mu[system.gen_slice]
        lam_Omega_next = partials.Omega[t] + gamma * lam_Omega_next + float(system.alpha_I @ mu_gen[t])
        mu_next_gen = mu_gen[t]

    omega_obs, tap_obs = _observed_feedback(system, traj)
    grad = PolicyGradient.zeros_like(policy)
    grad.dispatch[...] = mu_gen
    grad.alpha_I[...] = mu_gen.T @ traj.Omega
    grad.alpha_P[...] = mu_gen.T @ omega_obs
    if len(system.taps):
        grad.alpha_F[...] = np.einsum("tk,tk->k", mu_gen[:, system.tap_gen], tap_obs)
    return grad


def _forward_gradient(system: ClosedLoopSystem, traj: Trajectory, partials, policy: Policy) -> PolicyGradient:
    """Propagate dz/dparam for every parameter; used to cross-check the adjoint."""
    T = traj.horizon
    m, N, K = system.m, system.N, len(system.taps)
    gamma = traj.settings.gamma
    n_dispatch = (T + 1) * m
    P = n_dispatch + 2 * m + K
    off_P, off_I, off_F = n_dispatch, n_dispatch + m, n_dispatch + 2 * m

    gz_direct = _direct_z_partials(system, traj, partials)
    omega_obs, tap_obs = _observed_feedback(system, traj)
    total = np.zeros(P)
    dOmega = np.zeros(P)
    dz_prev = np.zeros((N, P))
    gen_rows = np.arange(system.gen_slice.start, system.gen_slice.stop)
    for t in range(T + 1):
        rhs = np.zeros((N, P))
        rhs[gen_rows, t * m + np.arange(m)] = 1.0
        rhs[system.gen_slice] += np.outer(system.alpha_I, dOmega)
        rhs[gen_rows, off_I + np.arange(m)] += traj.Omega[t]
        rhs[gen_rows, off_P + np.arange(m)] += omega_obs[t]
        if K:
            rhs[gen_rows[system.tap_gen], off_F + np.arange(K)] += tap_obs[t]
        if system.lag:
            rhs[system.gen_slice] += system.Y @ dz_prev
        dz = system.solve(rhs)
        total += gz_direct[t] @ dz + partials.Omega[t] * dOmega
        dOmega = dz[0] + gamma * dOmega
        dz_prev = dz

    grad = PolicyGradient.zeros_like(policy)
    grad.dispatch[...] = total[:n_dispatch].reshape(T + 1, m)
    grad.alpha_P[...] = total[off_P:off_I]
    grad.alpha_I[...] = total[off_I:off_F]
    grad.alpha_F[...] = total[off_F:]
    return grad


def policy_gradient(
    grid: Grid,
    policy: Policy,
    ensemble,
    settings: Optional[ControlSettings] = None,
    mode: str = "adjoint",
) -> Tuple[float, PolicyGradient]:
    """Ensemble objective and its exact gradient with respect to every policy entry."""
    settings = settings or ControlSettings()
    if mode not in ("adjoint", "forward"):
        raise ValueError(f"mode must be 'adjoint' or 'forward', got {mode!r}")
    check_probabilities([s.prob for s in ensemble.scenarios])
    policy.validate(grid, ensemble.horizon)
    try:
        system = ClosedLoopSystem(grid, policy, settings)
    except FeedbackSingularityError as exc:
        raise SimulationError(f"closed loop singular for every scenario: {exc}") from exc

    accumulate = _adjoint_gradient if mode == "adjoint" else _forward_gradient
    total = 0.0
    grad = PolicyGradient.zeros_like(policy)
    for scenario in ensemble.scenarios:
        traj = simulate(grid, policy, scenario, settings, system)
        cost, partials = scenario_cost_partials(grid, traj)
        total += scenario.prob * cost
        if scenario.prob != 0.0:
            grad.add(accumulate(system, traj, partials, policy), scenario.prob)
    return total, grad


def objective_and_gradient(
    v: ParamVector,
    grid: Grid,
    ensemble,
    spec: SchemeSpec,
    base: Policy,
    settings: Optional[ControlSettings] = None,
    mode: str = "adjoint",
) -> Tuple[float, np.ndarray]:
    """Objective at ``unpack(v)`` and its gradient in the scaled free coordinates."""
    if not np.all(np.isfinite(v.values)):
        raise NonFiniteObjectiveError("parameter vector contains non-finite entries")
    policy = unpack(v, spec, base)
    f, grad = policy_gradient(grid, policy, ensemble, settings, mode)
    g = np.empty_like(v.values)
    for slot in v.layout:
        g[slot.slice] = grad.block(slot.block).ravel() * slot.scale
    return f, g


# ---------------------------------------------------------------------------
# Initialisation


def initial_policy(
    grid: Grid,
    base_scenario,
    gen_ids: Optional[Sequence[GenId]] = None,
    settings: Optional[ControlSettings] = None,
    droop_multiple: float = DROOP_MULTIPLE,
) -> Policy:
    """Forecast economic dispatch with a uniform droop; no integral or flow feedback.

    The droop is capped at each unit's speed-regulation limit.
    """
    gen_ids = tuple(gen_ids) if gen_ids is not None else tuple(base_scenario.commitment)
    m = len(gen_ids)
    dispatch = forecast_dispatch(grid, gen_ids, base_scenario.p_R, base_scenario.p_L0, base_scenario.p_fixed)
    droop = -droop_multiple * float(np.sum(np.abs(grid.beta))) / m
    alpha_P = np.maximum(np.full(m, droop), [grid.generators[g].droop_floor for g in gen_ids])
    return Policy(
        gen_ids=gen_ids,
        dispatch=dispatch,
        alpha_P=alpha_P,
        alpha_I=np.zeros(m),
        alpha_F=np.zeros(len(feedback_taps(grid, gen_ids))),
    )


# ---------------------------------------------------------------------------
# L-BFGS-B driver


@dataclass
class PassReport:
    free: List[str]
    zeroed: List[str]
    iterations: int
    evaluations: int
    initial_objective: float
    final_objective: float
    objective_trace: List[float]
    final_gradient_norm: float
    termination: str
    wall_time: float


@dataclass
class OptReport:
    scheme: str
    passes: List[PassReport] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return sum(p.iterations for p in self.passes)

    @property
    def objective_trace(self) -> List[float]:
        trace: List[float] = []
        for p in self.passes:
            trace.extend(p.objective_trace)
        return trace

    @property
    def initial_objective(self) -> float:
        return self.passes[0].initial_objective

    @property
    def final_objective(self) -> float:
        return self.passes[-1].final_objective

    @property
    def final_gradient_norm(self) -> float:
        return self.passes[-1].final_gradient_norm

    @property
    def termination(self) -> str:
        return self.passes[-1].termination

    @property
    def wall_time(self) -> float:
        return sum(p.wall_time for p in self.passes)

    def to_dict(self, include_runtime: bool = True) -> Dict[str, Any]:
        passes = []
        for p in self.passes:
            entry = dict(p.__dict__)
            if not include_runtime:
                entry.pop("wall_time")
            passes.append(entry)
        data = {
            "scheme": self.scheme,
            "iterations": self.iterations,
            "initial_objective": self.initial_objective,
            "final_objective": self.final_objective,
            "final_gradient_norm": self.final_gradient_norm,
            "termination": self.termination,
            "passes": passes,
        }
        if include_runtime:
            data["wall_time"] = self.wall_time
        return data


class _Evaluator:
    """Memoised objective/gradient in scaled coordinates for one pass."""

    def __init__(self, grid, ensemble, spec, base, v0: ParamVector, control, mode):
        self.grid = grid
        self.ensemble = ensemble
        self.spec = spec
        self.base = base
        self.v0 = v0
        self.control = control
        self.mode = mode
        self.cache: Dict[bytes, Tuple[float, np.ndarray]] = {}
        self.evaluations = 0
        self.rejected_value: Optional[float] = None

    def __call__(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        key = np.asarray(x, dtype=float).tobytes()
        if key in self.cache:
            f, g = self.cache[key]
            return f, g.copy()
        self.evaluations += 1
        try:
            f, g = objective_and_gradient(
                self.v0.with_values(x), self.grid, self.ensemble, self.spec, self.base, self.control, self.mode
            )
        except SimulationError as exc:
            if not isinstance(exc.__cause__, FeedbackSingularityError) or self.rejected_value is None:
                raise
            # trial point beyond the closed-loop singularity; push the line search back
            logger.warning(f"Rejecting trial point: {exc}")
            f, g = self.rejected_value, np.zeros_like(x)
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            raise NonFiniteObjectiveError(f"non-finite objective {f} after {self.evaluations} evaluations")
        self.cache[key] = (f, g.copy())
        return f, g


def _run_pass(
    policy: Policy,
    grid: Grid,
    ensemble,
    spec: SchemeSpec,
    pass_index: int,
    settings: OptimizerSettings,
    control: ControlSettings,
) -> Tuple[Policy, PassReport]:
    opt_pass = spec.passes[pass_index]
    started = time.perf_counter()
    v0 = pack(policy, spec, grid, pass_index)
    bounds = parameter_bounds(grid, policy, v0)
    clipped = np.clip(v0.values, bounds.lb, bounds.ub)
    if not np.array_equal(clipped, v0.values):
        logger.warning(f"Start of {spec.name} pass {pass_index + 1} moved inside the droop bounds")
        v0 = v0.with_values(clipped)
    evaluator = _Evaluator(grid, ensemble, spec, policy, v0, control, settings.mode)
    f0, g0 = evaluator(v0.values)
    evaluator.rejected_value = 1e6 * (abs(f0) + 1.0)
    g0_norm = float(np.max(np.abs(g0))) if len(g0) else 0.0
    logger.info(
        f"Pass {pass_index + 1}/{len(spec.passes)} of {spec.name}: {len(v0)} free parameters "
        f"({', '.join(b.value for b in opt_pass.free)}), objective {f0:.6g}, |g|inf {g0_norm:.3g}"
    )

    trace = [f0]

    def record(xk: np.ndarray) -> None:
        fk, gk = evaluator(xk)
        trace.append(fk)
        logger.debug(f"  iter {len(trace) - 1}: objective {fk:.10g}, |g|inf {float(np.max(np.abs(gk))):.3g}")

    if g0_norm == 0.0:
        x_best, termination, nit = v0.values, "initial point stationary", 0
    else:
        result = minimize(
            evaluator,
            v0.values,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            callback=record,
            options={
                "maxcor": settings.history,
                "gtol": settings.tol,
                "ftol": settings.ftol,
                "maxiter": settings.max_iter,
            },
        )
        message = result.message.decode() if isinstance(result.message, bytes) else str(result.message)
        x_best, termination, nit = result.x, message, int(result.nit)
        f_best = evaluator(x_best)[0]
        if f_best > f0:
            x_best, f_best = v0.values, f0
        if "ABNORMAL" in message.upper() or result.status == 2:
            if f_best < f0:
                logger.warning(f"Line search stopped after progress ({message}); keeping best iterate")
            else:
                raise LineSearchError(
                    f"line search failed without progress on {spec.name} pass {pass_index + 1}: {message}",
                    iterate={"x": x_best.tolist(), "objective": f0, "gradient": g0.tolist()},
                )

    f_final, g_final = evaluator(x_best)
    if trace[-1] != f_final:
        trace.append(f_final)
    report = PassReport(
        free=[b.value for b in opt_pass.free],
        zeroed=[b.value for b in opt_pass.zeroed],
        iterations=nit,
        evaluations=evaluator.evaluations,
        initial_objective=f0,
        final_objective=f_final,
        objective_trace=trace,
        final_gradient_norm=float(np.max(np.abs(g_final))) if len(g_final) else 0.0,
        termination=termination,
        wall_time=time.perf_counter() - started,
    )
    logger.info(
        f"Pass {pass_index + 1} of {spec.name} finished: objective {f0:.6g} -> {f_final:.6g} "
        f"in {nit} iterations ({termination})"
    )
    return unpack(v0.with_values(x_best), spec, policy), report


def optimize(
    initial: Policy,
    grid: Grid,
    ensemble,
    spec: SchemeSpec,
    settings: Optional[OptimizerSettings] = None,
    control: Optional[ControlSettings] = None,
) -> Tuple[Policy, OptReport]:
    """Run the staged passes of ``spec`` starting from ``initial``."""
    settings = settings or OptimizerSettings()
    control = control or ControlSettings()
    try:
        policy_gradient(grid, initial, ensemble, control, settings.mode)
    except SimulationError as exc:
        raise OptimizationError(f"initial policy is not simulable on the training ensemble: {exc}") from exc

    report = OptReport(scheme=spec.name)
    policy = initial
    for pass_index in range(len(spec.passes)):
        policy, pass_report = _run_pass(policy, grid, ensemble, spec, pass_index, settings, control)
        report.passes.append(pass_report)
    return policy, report


def convexity_probe(
    grid: Grid,
    ensemble,
    spec: SchemeSpec,
    base: Policy,
    samples: int = 50,
    seed: int = 0,
    radius: float = 0.1,
    control: Optional[ControlSettings] = None,
) -> Dict[str, Any]:
    """Midpoint-convexity test of the objective on random pairs around ``base``."""
    control = control or ControlSettings()
    rng = np.random.default_rng(seed)
    v0 = pack(base, spec, grid)

    def value(x: np.ndarray) -> float:
        f, _ = policy_gradient(grid, unpack(v0.with_values(x), spec, base), ensemble, control)
        return f

    violations, skipped, worst = 0, 0, 0.0
    for _ in range(samples):
        x = v0.values + radius * rng.standard_normal(len(v0))
        y = v0.values + radius * rng.standard_normal(len(v0))
        try:
            fx, fy, fm = value(x), value(y), value(0.5 * (x + y))
        except SimulationError:
            skipped += 1
            continue
        gap = fm - 0.5 * (fx + fy)
        if gap > 1e-9 * max(abs(fx), abs(fy), 1.0):
            violations += 1
            worst = max(worst, gap)
    tested = samples - skipped
    result = {
        "scheme": spec.name,
        "samples": samples,
        "tested": tested,
        "skipped": skipped,
        "violations": violations,
        "violation_fraction": violations / tested if tested else 0.0,
        "max_gap": worst,
        "radius": radius,
        "seed": seed,
    }
    logger.info(f"Convexity probe on {spec.name}: {violations}/{tested} midpoint violations")
    return result


# ---------------------------------------------------------------------------
# Serialisation


def _tap_keys(grid: Grid, gen_ids: Sequence[GenId]) -> List[Tuple[GenId, str]]:
    taps = feedback_taps(grid, gen_ids)
    seen: Dict[Tuple[GenId, int], int] = {}
    for tap in taps:
        seen[(tap.gen_id, tap.neighbor)] = seen.get((tap.gen_id, tap.neighbor), 0) + 1
    keys = []
    for tap in taps:
        key = str(tap.neighbor)
        if seen[(tap.gen_id, tap.neighbor)] > 1:
            key = f"{tap.neighbor}:{tap.line}"  # parallel lines
        keys.append((tap.gen_id, key))
    return keys


def policy_to_dict(policy: Policy, grid: Grid) -> Dict[str, Any]:
    alpha_F: Dict[str, Dict[str, float]] = {str(g): {} for g in policy.gen_ids}
    for (g, key), gain in zip(_tap_keys(grid, policy.gen_ids), policy.alpha_F):
        alpha_F[str(g)][key] = float(gain)
    return {
        "gen_ids": [int(g) for g in policy.gen_ids],
        "dispatch": policy.dispatch.tolist(),
        "alpha_P": {str(g): float(a) for g, a in zip(policy.gen_ids, policy.alpha_P)},
        "alpha_I": {str(g): float(a) for g, a in zip(policy.gen_ids, policy.alpha_I)},
        "alpha_F": alpha_F,
    }


def policy_from_dict(data: Dict[str, Any], grid: Grid) -> Policy:
    try:
        gen_ids = tuple(int(g) for g in data["gen_ids"])
        alpha_P = np.array([float(data["alpha_P"][str(g)]) for g in gen_ids])
        alpha_I = np.array([float(data["alpha_I"][str(g)]) for g in gen_ids])
        alpha_F = np.array(
            [float(data["alpha_F"].get(str(g), {}).get(key, 0.0)) for g, key in _tap_keys(grid, gen_ids)]
        )
        policy = Policy(
            gen_ids=gen_ids,
            dispatch=np.asarray(data["dispatch"], dtype=float).reshape(-1, len(gen_ids)),
            alpha_P=alpha_P,
            alpha_I=alpha_I,
            alpha_F=alpha_F,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DimensionError(f"malformed policy document: {exc}")
    policy.validate(grid)
    return policy
