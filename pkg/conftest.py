from pathlib import Path

import networkx as nx
import numpy as np
import pytest

from config import ControlSettings
from dynamics import Policy, feedback_taps
from grid_model import grid_from_dict
from scenarios import Scenario, ScenarioSet

DATA_DIR = Path(__file__).parent / "data"


def make_case(buses, lines, generators, reference_bus=0):
    """Native case mapping from compact tuples.

    buses: beta per bus; lines: (from, to, s_d, limit[, p0]);
    generators: dicts merged over permissive defaults.
    """
    gens = []
    for entry in generators:
        gen = {
            "online": True,
            "c1": 0.01,
            "c2": 20.0,
            "c3": 0.0,
            "p_min": -1000.0,
            "p_max": 1000.0,
            "ramp_min": -1000.0,
            "ramp_max": 1000.0,
        }
        gen.update(entry)
        gens.append(gen)
    return {
        "base_mva": 100.0,
        "reference_bus": reference_bus,
        "buses": [{"id": i, "beta_l": beta} for i, beta in enumerate(buses)],
        "lines": [
            {
                "from": ln[0],
                "to": ln[1],
                "dynamic_impedance": ln[2],
                "thermal_limit": ln[3],
                "nominal_flow": ln[4] if len(ln) > 4 else 0.0,
            }
            for ln in lines
        ],
        "generators": gens,
    }


def make_grid(buses, lines, generators, reference_bus=0, horizon_hours=1.0):
    return grid_from_dict(make_case(buses, lines, generators, reference_bus), horizon_hours=horizon_hours)


def random_connected_graph(rng, n, extra_edge_prob=0.1):
    """Random connected graph: G(n, p) with its components chained together."""
    graph = nx.gnp_random_graph(n, extra_edge_prob, seed=int(rng.integers(2**31)))
    components = [sorted(c) for c in nx.connected_components(graph)]
    for left, right in zip(components, components[1:]):
        graph.add_edge(int(rng.choice(left)), int(rng.choice(right)))
    return graph


def random_grid(rng, n_buses, n_gens=None, limit=1e4, with_nominal=False, horizon_hours=1.0, p_min=0.0, p_max=400.0):
    graph = random_connected_graph(rng, n_buses)
    n_gens = n_gens or max(1, min(3, n_buses))
    gen_buses = sorted(rng.choice(n_buses, size=n_gens, replace=False).tolist())
    buses = (-rng.uniform(5.0, 50.0, size=n_buses)).tolist()
    lines = []
    for i, j in graph.edges():
        p0 = float(rng.uniform(-20, 20)) if with_nominal else 0.0
        lines.append((int(i), int(j), float(rng.uniform(5e-4, 5e-3)), limit, p0))
    gens = [
        {
            "bus": b,
            "c1": float(rng.uniform(0.002, 0.02)),
            "c2": float(rng.uniform(10, 30)),
            "p_min": p_min,
            "p_max": p_max,
            "ramp_min": -20.0,
            "ramp_max": 20.0,
        }
        for b in gen_buses
    ]
    return make_grid(buses, lines, gens, reference_bus=int(rng.integers(n_buses)), horizon_hours=horizon_hours)


def random_policy(rng, grid, horizon, flow_gain=0.15):
    gen_ids = grid.online_generators
    m = len(gen_ids)
    return Policy(
        gen_ids=gen_ids,
        dispatch=rng.uniform(50, 150, size=(horizon + 1, m)),
        alpha_P=-rng.uniform(100, 2000, size=m),
        alpha_I=-rng.uniform(0, 500, size=m),
        alpha_F=rng.uniform(-flow_gain, flow_gain, size=len(feedback_taps(grid, gen_ids))),
    )


def random_scenario(rng, grid, horizon, scenario_id=0, prob=1.0):
    n = grid.n_buses
    load = -rng.uniform(10, 60, size=(horizon + 1, n))
    wind = np.zeros((horizon + 1, n))
    wind[:, int(rng.integers(n))] = rng.uniform(0, 80, size=horizon + 1)
    return Scenario(
        scenario_id=scenario_id,
        p_R=wind,
        p_L0=load,
        commitment=grid.online_generators,
        prob=prob,
    )


def constant_scenario(grid, horizon, load, wind=None, scenario_id=0, prob=1.0):
    n = grid.n_buses
    p_L0 = np.tile(np.asarray(load, dtype=float), (horizon + 1, 1))
    p_R = np.zeros((horizon + 1, n)) if wind is None else np.tile(np.asarray(wind, dtype=float), (horizon + 1, 1))
    return Scenario(scenario_id=scenario_id, p_R=p_R, p_L0=p_L0, commitment=grid.online_generators, prob=prob)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_bus_grid():
    return make_grid([0.0, -10.0], [(0, 1, 0.5, 100.0)], [{"bus": 0}])


@pytest.fixture
def single_bus_grid():
    """One aggregate bus with sum(beta) = -1000 MW/Hz and one generator."""
    return make_grid([-1000.0], [], [{"bus": 0, "c1": 0.0, "c2": 0.0}])


@pytest.fixture
def triangle_grid():
    lines = [(0, 1, 0.01, 100.0), (1, 2, 0.01, 100.0), (0, 2, 0.01, 100.0)]
    return make_grid([-5.0, -5.0, -5.0], lines, [{"bus": 0}])


@pytest.fixture
def control():
    return ControlSettings()


@pytest.fixture
def short_control():
    return ControlSettings(horizon=4)


@pytest.fixture
def small_ensemble(rng):
    """Random 5-bus grid with two equally likely scenarios over four steps."""
    grid = random_grid(rng, 5, horizon_hours=4 * 5 / 60)
    scenarios = [random_scenario(rng, grid, 4, scenario_id=k, prob=0.5) for k in range(2)]
    return grid, ScenarioSet(scenarios, seed=0)
