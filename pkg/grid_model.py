#!/usr/bin/env python3
"""
Grid data model: buses, lines and generators of one synchronous area.

Ingests native JSON cases and MATPOWER-style ``.m`` tables, validates the
network invariants and computes the linearisation constants (dynamic
impedances, nominal flows) used by the power-flow and dynamics modules.
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from exceptions import GridParseError, GridValidationError, LinearizationError

logger = logging.getLogger(__name__)

BusId = int
GenId = int

DEFAULT_BASE_MVA = 100.0
DEFAULT_LOAD_DAMPING = 0.02  # fraction of bus load per Hz for MATPOWER cases
NOMINAL_FREQUENCY_HZ = 60.0


@dataclass(frozen=True)
class Bus:
    bus_id: BusId
    beta_l: float = 0.0  # MW/Hz, negative where load responds to frequency


@dataclass(frozen=True)
class Line:
    from_bus: BusId
    to_bus: BusId
    dynamic_impedance: float  # rad/MW
    thermal_limit: float  # MW
    nominal_flow: float = 0.0  # MW, from -> to


@dataclass(frozen=True)
class Generator:
    bus: BusId
    online: bool
    c1: float  # $/MW^2
    c2: float  # $/MW
    c3: float  # $
    p_min: float
    p_max: float
    ramp_min: float  # MW/min
    ramp_max: float  # MW/min
    energy_target: float  # MWh
    droop: Optional[float] = None  # per-unit speed regulation; None leaves alpha_P unbounded

    @property
    def droop_floor(self) -> float:
        """Steepest admissible frequency gain in MW/Hz (-inf without a droop)."""
        if self.droop is None:
            return -math.inf
        return -self.p_max / (self.droop * NOMINAL_FREQUENCY_HZ)


@dataclass(frozen=True)
class Grid:
    """Immutable network description; numeric views are cached on first use."""

    buses: Tuple[Bus, ...]
    lines: Tuple[Line, ...]
    generators: Tuple[Generator, ...]
    reference_bus: BusId
    base_mva: float = DEFAULT_BASE_MVA
    _cache: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False, hash=False)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @cached_property
    def beta(self) -> np.ndarray:
        return np.array([b.beta_l for b in self.buses], dtype=float)

    @property
    def total_beta(self) -> float:
        return float(self.beta.sum())

    @cached_property
    def line_from(self) -> np.ndarray:
        return np.array([ln.from_bus for ln in self.lines], dtype=int)

    @cached_property
    def line_to(self) -> np.ndarray:
        return np.array([ln.to_bus for ln in self.lines], dtype=int)

    @cached_property
    def susceptance(self) -> np.ndarray:
        """Line weights 1/s_d in MW/rad."""
        return np.array([1.0 / ln.dynamic_impedance for ln in self.lines], dtype=float)

    @cached_property
    def thermal_limits(self) -> np.ndarray:
        return np.array([ln.thermal_limit for ln in self.lines], dtype=float)

    @cached_property
    def nominal_flows(self) -> np.ndarray:
        return np.array([ln.nominal_flow for ln in self.lines], dtype=float)

    @cached_property
    def online_generators(self) -> Tuple[GenId, ...]:
        return tuple(g for g, gen in enumerate(self.generators) if gen.online)

    def generator_array(self, attribute: str, gen_ids: Sequence[GenId]) -> np.ndarray:
        """Column of one generator attribute for the given generators."""
        return np.array([getattr(self.generators[g], attribute) for g in gen_ids], dtype=float)

    def incident_lines(self, bus: BusId) -> List[int]:
        return [k for k, ln in enumerate(self.lines) if bus in (ln.from_bus, ln.to_bus)]

    def cached(self, key: str, factory: Callable[[], Any]) -> Any:
        """Memoise derived objects (factorisations) on this immutable grid."""
        if key not in self._cache:
            self._cache[key] = factory()
        return self._cache[key]


def dynamic_impedance(x: float, v_from: float, v_to: float, angle_diff0: float) -> float:
    """First-order linearisation of V_i V_j sin(dtheta)/x around angle_diff0.

    Returns s_d = x / (V_i V_j cos(angle_diff0)) in the units of ``x``.
    """
    if x <= 0:
        raise LinearizationError(f"reactance must be positive, got {x}")
    if v_from <= 0 or v_to <= 0:
        raise LinearizationError(f"voltages must be positive, got {v_from}, {v_to}")
    if abs(angle_diff0) >= math.pi / 2:
        raise LinearizationError(
            f"angle difference {angle_diff0:.6f} rad is at or beyond pi/2; linearisation invalid"
        )
    return x / (v_from * v_to * math.cos(angle_diff0))


# ---------------------------------------------------------------------------
# Validation


def validate_grid(grid: Grid) -> List[str]:
    """Return one message per violated invariant (empty when the grid is valid)."""
    violations: List[str] = []
    n = grid.n_buses

    ids = [b.bus_id for b in grid.buses]
    if ids != list(range(n)):
        violations.append(f"bus ids must be 0..{n - 1} in order, got {ids}")
    if not 0 <= grid.reference_bus < n:
        violations.append(f"reference bus {grid.reference_bus} out of range 0..{n - 1}")

    for k, ln in enumerate(grid.lines):
        if not (0 <= ln.from_bus < n and 0 <= ln.to_bus < n):
            violations.append(f"line {k} references unknown bus ({ln.from_bus}, {ln.to_bus})")
        elif ln.from_bus == ln.to_bus:
            violations.append(f"line {k} connects bus {ln.from_bus} to itself")
        if not ln.dynamic_impedance > 0:
            violations.append(f"line {k} dynamic impedance {ln.dynamic_impedance} is not positive")
        if not ln.thermal_limit > 0:
            violations.append(f"line {k} thermal limit {ln.thermal_limit} is not positive")

    by_bus: Dict[int, List[int]] = {}
    for g, gen in enumerate(grid.generators):
        if not 0 <= gen.bus < n:
            violations.append(f"generator {g} references unknown bus {gen.bus}")
        else:
            by_bus.setdefault(gen.bus, []).append(g)
        if gen.p_min > gen.p_max:
            violations.append(f"generator {g} p_min {gen.p_min} exceeds p_max {gen.p_max}")
        if not gen.ramp_min < 0 < gen.ramp_max:
            violations.append(
                f"generator {g} ramp limits ({gen.ramp_min}, {gen.ramp_max}) must satisfy ramp_min < 0 < ramp_max"
            )
        if gen.droop is not None and not gen.droop > 0:
            violations.append(f"generator {g} droop {gen.droop} is not positive")
    for bus, gens in sorted(by_bus.items()):
        if len(gens) > 1:
            violations.append(f"multiple generators at bus {bus} (generators {gens}); use --aggregate")

    total_beta = float(sum(b.beta_l for b in grid.buses))
    if total_beta == 0.0:
        violations.append("zero aggregate load frequency response")
    elif total_beta > 0.0:
        violations.append(f"positive aggregate load frequency response {total_beta} (must be negative)")

    graph = nx.Graph()
    graph.add_nodes_from(range(n))
    graph.add_edges_from(
        (ln.from_bus, ln.to_bus) for ln in grid.lines if 0 <= ln.from_bus < n and 0 <= ln.to_bus < n
    )
    if n > 0 and not nx.is_connected(graph):
        anchor = grid.reference_bus if 0 <= grid.reference_bus < n else 0
        for component in nx.connected_components(graph):
            if anchor not in component:
                violations.append(
                    f"disconnected buses {sorted(component)} unreachable from bus {anchor}"
                )
    return violations


# ---------------------------------------------------------------------------
# Native JSON schema


def _require(entry: Dict[str, Any], key: str, where: str) -> Any:
    if key not in entry:
        raise GridParseError("missing required value", field=f"{where}.{key}")
    return entry[key]


def _number(entry: Dict[str, Any], key: str, where: str, default: Any = None) -> float:
    raw = entry.get(key, default) if default is not None else _require(entry, key, where)
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise GridParseError(f"expected a number, got {raw!r}", field=f"{where}.{key}")


def aggregate_generators(generators: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Merge generators sharing a bus into one equivalent unit.

    Limits, ramps and energy targets add; quadratic cost curves combine by
    equal marginal cost. Linear units fall back to the cheapest slope.
    """
    grouped: Dict[int, List[Dict[str, Any]]] = {}
    for entry in generators:
        grouped.setdefault(int(entry["bus"]), []).append(entry)

    merged = []
    for bus in sorted(grouped):
        units = grouped[bus]
        if len(units) == 1:
            merged.append(units[0])
            continue
        online = [u for u in units if u.get("online", True)]
        members = online or units
        c1s = [float(u.get("c1", 0.0)) for u in members]
        c2s = [float(u.get("c2", 0.0)) for u in members]
        if all(c > 0 for c in c1s):
            c1 = 1.0 / sum(1.0 / c for c in c1s)
            c2 = c1 * sum(b / a for a, b in zip(c1s, c2s))
        else:
            c1 = 0.0
            c2 = min(b for a, b in zip(c1s, c2s) if a <= 0)
        entry = {
            "bus": bus,
            "online": bool(online),
            "c1": c1,
            "c2": c2,
            "c3": sum(float(u.get("c3", 0.0)) for u in members),
            "p_min": sum(float(u["p_min"]) for u in members),
            "p_max": sum(float(u["p_max"]) for u in members),
            "ramp_min": sum(float(u["ramp_min"]) for u in members),
            "ramp_max": sum(float(u["ramp_max"]) for u in members),
        }
        if all(u.get("energy_target") is not None for u in members):
            entry["energy_target"] = sum(float(u["energy_target"]) for u in members)
        droops = [u.get("droop") for u in members]
        if any(d is not None and not float(d) > 0 for d in droops):
            raise GridParseError(f"droop must be positive, got {droops}", field=f"generators at bus {bus}.droop")
        if all(d is not None for d in droops):
            # equal per-unit frequency response for the combined capacity
            entry["droop"] = entry["p_max"] / sum(float(u["p_max"]) / float(u["droop"]) for u in members)
        logger.info(f"Aggregated {len(members)} generators at bus {bus}")
        merged.append(entry)
    return merged


def grid_from_dict(case: Dict[str, Any], horizon_hours: float = 1.0, aggregate: bool = False) -> Grid:
    """Build and validate a Grid from the native schema mapping."""
    for key in ("buses", "lines", "generators", "reference_bus"):
        if key not in case:
            raise GridParseError("missing top-level section", field=key)
    base_mva = float(case.get("base_mva", DEFAULT_BASE_MVA))

    buses = []
    for i, entry in enumerate(case["buses"]):
        where = f"buses[{i}]"
        buses.append(Bus(bus_id=int(_require(entry, "id", where)), beta_l=_number(entry, "beta_l", where, 0.0)))

    lines = []
    for k, entry in enumerate(case["lines"]):
        where = f"lines[{k}]"
        if entry.get("dynamic_impedance") is not None:
            s_d = _number(entry, "dynamic_impedance", where)
        elif entry.get("reactance") is not None:
            per_unit = dynamic_impedance(
                _number(entry, "reactance", where),
                _number(entry, "v_from", where, 1.0),
                _number(entry, "v_to", where, 1.0),
                _number(entry, "angle_diff0", where, 0.0),
            )
            s_d = per_unit / base_mva
        else:
            raise GridParseError("either dynamic_impedance or reactance is required", field=f"{where}.dynamic_impedance")
        lines.append(
            Line(
                from_bus=int(_require(entry, "from", where)),
                to_bus=int(_require(entry, "to", where)),
                dynamic_impedance=s_d,
                thermal_limit=_number(entry, "thermal_limit", where),
                nominal_flow=_number(entry, "nominal_flow", where, 0.0),
            )
        )

    raw_generators = list(case["generators"])
    if aggregate:
        raw_generators = aggregate_generators(raw_generators)
    generators = []
    for g, entry in enumerate(raw_generators):
        where = f"generators[{g}]"
        p_max = _number(entry, "p_max", where)
        target = entry.get("energy_target")
        droop = entry.get("droop")
        generators.append(
            Generator(
                bus=int(_require(entry, "bus", where)),
                online=bool(entry.get("online", True)),
                c1=_number(entry, "c1", where, 0.0),
                c2=_number(entry, "c2", where, 0.0),
                c3=_number(entry, "c3", where, 0.0),
                p_min=_number(entry, "p_min", where),
                p_max=p_max,
                ramp_min=_number(entry, "ramp_min", where),
                ramp_max=_number(entry, "ramp_max", where),
                energy_target=float(target) if target is not None else p_max * horizon_hours / 2.0,
                droop=_number(entry, "droop", where) if droop is not None else None,
            )
        )

    grid = Grid(
        buses=tuple(buses),
        lines=tuple(lines),
        generators=tuple(generators),
        reference_bus=int(case["reference_bus"]),
        base_mva=base_mva,
    )
    violations = validate_grid(grid)
    if violations:
        raise GridValidationError(violations)
    logger.debug(f"Grid built: {grid.n_buses} buses, {grid.n_lines} lines, {len(generators)} generators")
    return grid


def grid_to_dict(grid: Grid) -> Dict[str, Any]:
    return {
        "base_mva": grid.base_mva,
        "reference_bus": grid.reference_bus,
        "buses": [{"id": b.bus_id, "beta_l": b.beta_l} for b in grid.buses],
        "lines": [
            {
                "from": ln.from_bus,
                "to": ln.to_bus,
                "dynamic_impedance": ln.dynamic_impedance,
                "thermal_limit": ln.thermal_limit,
                "nominal_flow": ln.nominal_flow,
            }
            for ln in grid.lines
        ],
        "generators": [
            {
                "bus": gen.bus,
                "online": gen.online,
                "c1": gen.c1,
                "c2": gen.c2,
                "c3": gen.c3,
                "p_min": gen.p_min,
                "p_max": gen.p_max,
                "ramp_min": gen.ramp_min,
                "ramp_max": gen.ramp_max,
                "energy_target": gen.energy_target,
                **({"droop": gen.droop} if gen.droop is not None else {}),
            }
            for gen in grid.generators
        ],
    }


def serialize_grid(grid: Grid) -> str:
    return json.dumps(grid_to_dict(grid), indent=2, sort_keys=True)


def with_energy_targets(grid: Grid, targets: Dict[GenId, float]) -> Grid:
    """Copy of ``grid`` with the energy targets of the listed generators replaced."""
    generators = tuple(
        replace(gen, energy_target=float(targets[g])) if g in targets else gen
        for g, gen in enumerate(grid.generators)
    )
    return replace(grid, generators=generators, _cache={})


# ---------------------------------------------------------------------------
# MATPOWER reader

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.DOTALL)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;")


def _matpower_tables(text: str) -> Dict[str, Tuple[int, List[List[float]]]]:
    """Numeric tables keyed by name, each with the 1-based line where it starts."""
    stripped = "\n".join(line.split("%", 1)[0] for line in text.splitlines())
    tables = {}
    for match in _MATRIX_RE.finditer(stripped):
        name = match.group(1)
        first_line = stripped.count("\n", 0, match.start()) + 1
        rows = []
        body = match.group(2)
        offset = stripped.count("\n", 0, match.start(2))
        for chunk in re.split(r"[;\n]", body):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                rows.append([float(tok) for tok in tokens])
            except ValueError:
                line_no = offset + 1 + body[: body.find(chunk)].count("\n")
                raise GridParseError(f"non-numeric entry in mpc.{name}: {chunk.strip()!r}", line=line_no)
        tables[name] = (first_line, rows)
    return tables


def parse_matpower(
    text: str,
    horizon_hours: float = 1.0,
    load_damping: float = DEFAULT_LOAD_DAMPING,
    aggregate: bool = False,
) -> Grid:
    """Read the bus/branch/gen/gencost tables of a MATPOWER case.

    Only the columns the Grid needs are consumed. Load frequency response is
    taken as ``-load_damping * Pd`` per bus since MATPOWER carries none.
    """
    tables = _matpower_tables(text)
    for name in ("bus", "branch", "gen"):
        if name not in tables:
            raise GridParseError(f"missing mpc.{name} table", field=name)
    scalar = _SCALAR_RE.search(text)
    base_mva = float(scalar.group(1)) if scalar else DEFAULT_BASE_MVA

    bus_line, bus_rows = tables["bus"]
    index = {}
    buses, vm, va, reference = [], [], [], None
    for i, row in enumerate(bus_rows):
        if len(row) < 9:
            raise GridParseError("bus row needs at least 9 columns", line=bus_line + i)
        index[int(row[0])] = i
        if int(row[1]) == 3 and reference is None:
            reference = i
        buses.append({"id": i, "beta_l": -load_damping * row[2]})
        vm.append(row[7])
        va.append(math.radians(row[8]))
    if reference is None:
        reference = 0
        logger.warning("MATPOWER case has no reference bus (type 3); using the first bus")

    branch_line, branch_rows = tables["branch"]
    lines = []
    for k, row in enumerate(branch_rows):
        if len(row) < 11:
            raise GridParseError("branch row needs at least 11 columns", line=branch_line + k)
        if row[10] == 0:
            continue
        try:
            f, t = index[int(row[0])], index[int(row[1])]
        except KeyError as exc:
            raise GridParseError(f"branch references unknown bus {exc.args[0]}", line=branch_line + k)
        s_d = dynamic_impedance(row[3], vm[f], vm[t], va[f] - va[t]) / base_mva
        rate = row[5] if row[5] > 0 else math.inf
        lines.append(
            {
                "from": f,
                "to": t,
                "dynamic_impedance": s_d,
                "thermal_limit": rate,
                "nominal_flow": row[13] if len(row) > 13 else 0.0,
            }
        )

    gen_line, gen_rows = tables["gen"]
    costs = tables.get("gencost", (0, []))[1]
    generators = []
    for g, row in enumerate(gen_rows):
        if len(row) < 10:
            raise GridParseError("gen row needs at least 10 columns", line=gen_line + g)
        p_max, p_min = row[8], row[9]
        if len(row) > 17 and row[17] > 0:
            ramp = row[17] / 10.0  # RAMP_10 is MW per 10 minutes
        else:
            ramp = max(p_max - p_min, 1.0) / 10.0
        c1 = c2 = c3 = 0.0
        if g < len(costs) and int(costs[g][0]) == 2:
            coeffs = costs[g][4 : 4 + int(costs[g][3])]
            padded = [0.0] * (3 - len(coeffs)) + list(coeffs[-3:])
            c1, c2, c3 = padded
        generators.append(
            {
                "bus": index[int(row[0])],
                "online": row[7] > 0,
                "c1": c1,
                "c2": c2,
                "c3": c3,
                "p_min": p_min,
                "p_max": p_max,
                "ramp_min": -ramp,
                "ramp_max": ramp,
            }
        )

    case = {
        "base_mva": base_mva,
        "reference_bus": reference,
        "buses": buses,
        "lines": lines,
        "generators": generators,
    }
    return grid_from_dict(case, horizon_hours=horizon_hours, aggregate=aggregate)


def parse_grid(case_text: str, horizon_hours: float = 1.0, aggregate: bool = False) -> Grid:
    """Parse a native JSON case, or a MATPOWER case when the text is not JSON."""
    if case_text.lstrip().startswith("{"):
        try:
            case = json.loads(case_text)
        except json.JSONDecodeError as exc:
            raise GridParseError(exc.msg, line=exc.lineno)
        return grid_from_dict(case, horizon_hours=horizon_hours, aggregate=aggregate)
    return parse_matpower(case_text, horizon_hours=horizon_hours, aggregate=aggregate)


def load_grid(path, horizon_hours: float = 1.0, aggregate: bool = False) -> Grid:
    path = Path(path)
    logger.info(f"Loading grid case {path}")
    return parse_grid(path.read_text(), horizon_hours=horizon_hours, aggregate=aggregate)
