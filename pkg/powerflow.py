"""
Linearised (DC-style) power flow with dynamic impedances.

Angles come from one sparse LU factorisation of the reduced weighted Laplacian
per grid; flows follow p_ij = p0_ij + (theta_i - theta_j) / s_d.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from config import BALANCE_RTOL, USE_NOMINAL_FLOWS
from exceptions import DimensionError, PowerFlowError
from grid_model import BusId, Grid

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Injections:
    p: np.ndarray  # MW per bus, generation positive


@dataclass(frozen=True, eq=False)
class AngleSolution:
    theta: np.ndarray  # rad per bus, reference bus pinned to 0


@dataclass(frozen=True, eq=False)
class LineFlows:
    """Flows of the stored line orientations; reverse directions are negated."""

    grid: Grid
    flows: np.ndarray  # MW per line, from -> to

    def between(self, i: BusId, j: BusId) -> float:
        total = 0.0
        for k, ln in enumerate(self.grid.lines):
            if (ln.from_bus, ln.to_bus) == (i, j):
                total += self.flows[k]
            elif (ln.from_bus, ln.to_bus) == (j, i):
                total -= self.flows[k]
        return float(total)


class PowerFlowModel:
    """Sparse network matrices and the reduced Laplacian factorisation of a grid."""

    def __init__(self, grid: Grid):
        n, L = grid.n_buses, grid.n_lines
        self.n_buses = n
        self.reference_bus = grid.reference_bus
        self.non_reference = np.array([i for i in range(n) if i != grid.reference_bus], dtype=int)

        rows = np.repeat(np.arange(L), 2)
        cols = np.column_stack([grid.line_from, grid.line_to]).ravel()
        vals = np.tile([1.0, -1.0], L)
        self.incidence = sp.csr_matrix((vals, (rows, cols)), shape=(L, n))
        self.weighted_incidence = sp.csr_matrix(self.incidence.multiply(grid.susceptance[:, None]))
        self.laplacian = (self.incidence.T @ self.weighted_incidence).tocsc()
        # flows = p0 + D_r theta_r
        self.flow_matrix = self.weighted_incidence.tocsc()[:, self.non_reference].toarray()
        self.nominal_divergence = self.incidence.T @ grid.nominal_flows

        self._lu = None
        if len(self.non_reference):
            reduced = self.laplacian[self.non_reference, :][:, self.non_reference].tocsc()
            self.reduced_laplacian = reduced.toarray()
            try:
                self._lu = splu(reduced)
            except RuntimeError as exc:
                raise PowerFlowError(f"reduced Laplacian is singular (network disconnected?): {exc}")
        else:
            self.reduced_laplacian = np.zeros((0, 0))
        logger.debug(f"Factorised reduced Laplacian for {n} buses, {L} lines")

    def solve_reduced(self, rhs: np.ndarray) -> np.ndarray:
        if self._lu is None:
            return np.zeros(0)
        return self._lu.solve(np.asarray(rhs, dtype=float))


def powerflow_model(grid: Grid) -> PowerFlowModel:
    """Per-grid cached PowerFlowModel."""
    return grid.cached("powerflow", lambda: PowerFlowModel(grid))


def check_balance(p: np.ndarray, rtol: float = BALANCE_RTOL) -> None:
    imbalance = float(np.sum(p))
    scale = float(np.sum(np.abs(p)))
    if abs(imbalance) > rtol * scale:
        raise PowerFlowError(f"unbalanced injections: sum {imbalance:.6g} MW exceeds tolerance {rtol * scale:.3g}")


def solve_angles(grid: Grid, inj: Injections, use_nominal_flows: bool = USE_NOMINAL_FLOWS) -> AngleSolution:
    """Solve B theta = p - div(p0) with the reference angle pinned to 0."""
    p = np.asarray(inj.p, dtype=float)
    if p.shape != (grid.n_buses,):
        raise DimensionError(f"injection vector has shape {p.shape}, expected ({grid.n_buses},)")
    check_balance(p)

    model = powerflow_model(grid)
    rhs = p - model.nominal_divergence if use_nominal_flows else p.copy()
    theta = np.zeros(grid.n_buses)
    nr = model.non_reference
    theta[nr] = model.solve_reduced(rhs[nr])

    # the reference row is implied by balance
    residual = (model.laplacian @ theta - rhs)[nr]
    scale = max(float(np.abs(rhs).sum()), 1.0)
    if not np.all(np.isfinite(theta)) or float(np.abs(residual).max(initial=0.0)) > 1e-9 * scale:
        raise PowerFlowError(
            f"angle solve residual {float(np.abs(residual).max()):.3g} exceeds tolerance; Laplacian ill-conditioned"
        )
    return AngleSolution(theta=theta)


def line_flows(grid: Grid, theta: AngleSolution, use_nominal_flows: bool = USE_NOMINAL_FLOWS) -> LineFlows:
    model = powerflow_model(grid)
    flows = model.weighted_incidence @ np.asarray(theta.theta, dtype=float)
    if use_nominal_flows:
        flows = flows + grid.nominal_flows
    return LineFlows(grid=grid, flows=np.asarray(flows, dtype=float))


def flow_divergence(grid: Grid, flows: LineFlows) -> np.ndarray:
    """Net flow leaving each bus; equals the bus injection for a solved flow."""
    model = powerflow_model(grid)
    return np.asarray(model.incidence.T @ flows.flows, dtype=float)
