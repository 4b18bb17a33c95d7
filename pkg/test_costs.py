import math
from dataclasses import replace

import numpy as np
import pytest

from config import ControlSettings
from conftest import constant_scenario, make_grid, random_grid, random_policy, random_scenario
from costs import (
    CostBreakdown,
    PenaltySpec,
    check_probabilities,
    ensemble_objective,
    penalty,
    scenario_cost,
    scenario_cost_partials,
    stage_cost,
    total_breakdown,
    violation_counts,
)
from dynamics import Policy, SystemState, simulate
from exceptions import DimensionError, PenaltyBoundsError, SimulationError
from powerflow import LineFlows
from scenarios import ScenarioSet


def value(a, l, u):
    return float(penalty(a, l, u)[0])


def slope(a, l, u):
    return float(penalty(a, l, u)[1])


def central_difference(func, a, h):
    # exact representable steps around a
    hp = (a + h) - a
    hm = a - (a - h)
    return (func(a + hp) - func(a - hm)) / (hp + hm)


class TestPenalty:
    def test_inside_band(self):
        assert value(5.0, 0.0, 10.0) == 0.0
        assert slope(5.0, 0.0, 10.0) == 0.0

    def test_ten_percent_violation_calibration(self):
        assert value(11.1, 0.0, 10.0) == pytest.approx(1e7, rel=1e-9)

    def test_cubic_growth(self):
        assert value(11.0, 0.0, 10.0) == pytest.approx(1e7 / 1.1**3, rel=1e-12)
        assert value(11.0, 0.0, 10.0) == pytest.approx(7.5131e6, rel=1e-5)

    def test_symmetric_below(self):
        assert value(-11.1, -10.0, 0.0) == pytest.approx(1e7, rel=1e-9)
        assert slope(-11.0, -10.0, 0.0) < 0

    def test_frequency_band_example(self):
        # 1 mHz beyond a 10 mHz band; the scale is 0.1 * (0.01 + 1)
        assert value(0.011, -0.01, 0.01) == pytest.approx(1e7 * (0.001 / 0.101) ** 3, rel=1e-9)
        assert value(0.011, -0.01, 0.01) == pytest.approx(9.7059, rel=1e-4)

    def test_infinite_bounds_never_activate(self):
        assert value(1e300, -math.inf, math.inf) == 0.0
        assert value(-1e6, -math.inf, 0.0) == 0.0

    def test_inverted_bounds(self):
        with pytest.raises(PenaltyBoundsError):
            penalty(1.0, 2.0, 1.0)
        with pytest.raises(PenaltyBoundsError):
            PenaltySpec(2.0, 1.0)
        with pytest.raises(ValueError):
            penalty(np.zeros(3), np.array([0.0, 2.0, 0.0]), np.ones(3))

    def test_elementwise_broadcast(self):
        values, slopes = penalty(np.array([-2.0, 0.5, 2.0]), 0.0, 1.0)
        assert values.shape == (3,)
        assert values[1] == 0.0
        assert values[0] > 0 and values[2] > 0
        assert slopes[0] < 0 < slopes[2]
        spec = PenaltySpec(0.0, 1.0)
        np.testing.assert_array_equal(spec(np.array([2.0]))[0], values[2:])

    def test_spec_shape_parameters(self):
        # scales: 0.5 * (1 + 1) above, 0.5 * (0 + 1) below
        spec = PenaltySpec(0.0, 1.0, weight=8.0, band=0.5, exponent=2)
        values, slopes = spec(np.array([1.5, -0.5]))
        np.testing.assert_allclose(values, [8.0 * 0.5**2, 8.0 * 1.0**2], rtol=1e-12)
        np.testing.assert_allclose(slopes, [2 * 8.0 * 0.5 / 1.0, -2 * 8.0 * 1.0 / 0.5], rtol=1e-12)
        assert spec(np.array([0.5]))[0][0] == 0.0

    def test_nonnegative_and_monotone(self, rng):
        l, u = -3.0, 4.0
        a = np.sort(rng.uniform(-50, 50, size=2000))
        values, _ = penalty(a, l, u)
        assert np.all(values >= 0)
        assert np.all(np.diff(values[a > u]) >= 0)
        assert np.all(np.diff(values[a < l]) <= 0)

    def test_boundary_smoothness(self, rng):
        """Value, slope and curvature agree on both sides of each bound."""
        for _ in range(1000):
            l = float(rng.uniform(-100, 100))
            u = l + float(rng.uniform(0, 50))
            for bound, outward in ((u, 1.0), (l, -1.0)):
                s = 0.1 * (abs(bound) + 1.0)
                eps = 1e-6 * s
                reference = [
                    value(bound + outward * 0.1 * s, l, u),
                    abs(slope(bound + outward * 0.1 * s, l, u)),
                    abs(central_difference(lambda x: slope(x, l, u), bound + outward * 0.1 * s, eps)),
                ]

                def derivatives(a):
                    return [
                        value(a, l, u),
                        slope(a, l, u),
                        central_difference(lambda x: slope(x, l, u), a, eps / 2),
                    ]

                outside = derivatives(bound + outward * eps)
                inside = derivatives(bound - outward * eps)
                for k in range(3):
                    assert abs(outside[k] - inside[k]) <= 1e-3 * reference[k]

    def test_slope_matches_finite_difference(self, rng):
        for _ in range(200):
            l = float(rng.uniform(-100, 0))
            u = l + float(rng.uniform(0.5, 50))
            for bound, outward in ((u, 1.0), (l, -1.0)):
                s = 0.1 * (abs(bound) + 1.0)
                a = bound + outward * float(rng.uniform(0.2, 2.0)) * s
                fd = central_difference(lambda x: value(x, l, u), a, 1e-5 * s)
                assert fd == pytest.approx(slope(a, l, u), rel=1e-7)


@pytest.fixture
def cost_grid():
    gen = {
        "bus": 0,
        "c1": 0.01,
        "c2": 20.0,
        "c3": 5.0,
        "p_min": 0.0,
        "p_max": 100.0,
        "ramp_min": -10.0,
        "ramp_max": 10.0,
        "energy_target": 10.0,
    }
    return make_grid([-1000.0], [], [gen])


def state(p_go, p_I=0.0):
    return SystemState(Omega=0.0, p_go=np.array([p_go]), p_I=np.array([p_I]))


class TestStageCost:
    def test_interior_is_generation_cost_only(self, cost_grid):
        flows = LineFlows(grid=cost_grid, flows=np.zeros(0))
        stage = stage_cost(cost_grid, state(50.0), state(52.0), 0.0, 0.0, flows, 0, 2)
        assert stage.gen_cost == pytest.approx(0.01 * 2500 + 20 * 50 + 5)
        assert stage.total == stage.gen_cost

    def test_generation_limit_calibration(self):
        grid = make_grid([-1000.0], [], [{"bus": 0, "p_min": 0.0, "p_max": 10.0}])
        flows = LineFlows(grid=grid, flows=np.zeros(0))
        stage = stage_cost(grid, state(11.1), state(11.1), 0.0, 0.0, flows, 0, 2)
        assert stage.gen_limit_pen == pytest.approx(1e7, rel=1e-9)

    def test_frequency_term(self, cost_grid):
        flows = LineFlows(grid=cost_grid, flows=np.zeros(0))
        stage = stage_cost(cost_grid, state(50.0), state(50.0), 0.011, 0.0, flows, 0, 2)
        assert stage.freq_pen == pytest.approx(9.7059, rel=1e-4)
        assert stage.int_freq_pen == 0.0

    def test_ramp_uses_rate_per_minute(self, cost_grid):
        flows = LineFlows(grid=cost_grid, flows=np.zeros(0))
        # 55.5 MW over 5 minutes is 11.1 MW/min, 10% beyond ramp_max
        stage = stage_cost(cost_grid, state(20.0), state(75.5), 0.0, 0.0, flows, 0, 2)
        assert stage.ramp_pen == pytest.approx(1e7, rel=1e-9)

    def test_energy_only_on_last_stage(self, cost_grid):
        flows = LineFlows(grid=cost_grid, flows=np.zeros(0))
        early = stage_cost(cost_grid, state(50.0), state(50.0, p_I=11.05), 0.0, 0.0, flows, 0, 2)
        last = stage_cost(cost_grid, state(50.0), state(50.0, p_I=11.05), 0.0, 0.0, flows, 1, 2)
        assert early.energy_pen == 0.0
        assert last.energy_pen == pytest.approx(value(11.05, 9.5, 10.5))

    def test_flow_limits(self):
        grid = make_grid([-5.0, -5.0], [(0, 1, 0.1, 100.0)], [{"bus": 0}])
        stage = stage_cost(grid, state(0.0), state(0.0), 0.0, 0.0, LineFlows(grid, np.array([-111.0])), 0, 1)
        assert stage.flow_pen == pytest.approx(value(-111.0, -100.0, 100.0))

    def test_generator_order_invariant(self, rng):
        gens = [
            {"bus": 0, "c1": 0.02, "c2": 18.0, "c3": 3.0, "p_min": 0.0, "p_max": 100.0, "energy_target": 8.0},
            {"bus": 1, "c1": 0.01, "c2": 25.0, "p_min": 20.0, "p_max": 80.0, "ramp_min": -4.0, "ramp_max": 4.0,
             "energy_target": 5.0},
            {"bus": 2, "c1": 0.005, "c2": 30.0, "p_min": 0.0, "p_max": 60.0, "energy_target": 3.0},
        ]
        lines = [(0, 1, 0.01, 50.0), (1, 2, 0.01, 50.0)]
        p = np.array([101.0, 15.0, 40.0])
        p_next = np.array([90.0, 45.0, 41.0])
        p_I = np.array([8.5, 4.0, 3.0])
        flows = np.array([55.0, -20.0])
        reference = None
        for order in ([0, 1, 2], [2, 0, 1], [1, 2, 0]):
            grid = make_grid([-5.0, -5.0, -5.0], lines, [gens[k] for k in order])
            flow = LineFlows(grid, flows)
            x_t = SystemState(Omega=0.0, p_go=p[order], p_I=np.zeros(3))
            x_t1 = SystemState(Omega=0.0, p_go=p_next[order], p_I=p_I[order])
            stage = stage_cost(grid, x_t, x_t1, 0.012, -0.02, flow, 1, 2)
            if reference is None:
                reference = stage
                assert min(stage.gen_limit_pen, stage.ramp_pen, stage.energy_pen, stage.flow_pen) > 0
            for name, amount in stage.to_dict().items():
                assert amount == pytest.approx(reference.to_dict()[name], rel=1e-12, abs=1e-12)

            # same grid, generator columns visited in another order
            perm = tuple(int(g) for g in rng.permutation(3))
            shuffled = stage_cost(
                grid,
                SystemState(Omega=0.0, p_go=x_t.p_go[list(perm)], p_I=np.zeros(3)),
                SystemState(Omega=0.0, p_go=x_t1.p_go[list(perm)], p_I=x_t1.p_I[list(perm)]),
                0.012, -0.02, flow, 1, 2, gen_ids=perm,
            )
            for name, amount in shuffled.to_dict().items():
                assert amount == pytest.approx(reference.to_dict()[name], rel=1e-12, abs=1e-12)

    def test_stage_index_checked(self, cost_grid):
        flows = LineFlows(grid=cost_grid, flows=np.zeros(0))
        with pytest.raises(DimensionError):
            stage_cost(cost_grid, state(50.0), state(50.0), 0.0, 0.0, flows, 2, 2)

    def test_breakdown_arithmetic(self):
        a = CostBreakdown(gen_cost=1.0, freq_pen=2.0)
        b = CostBreakdown(gen_cost=3.0, energy_pen=4.0)
        combined = total_breakdown([a, b])
        assert combined.total == 10.0
        assert combined.to_dict()["gen_cost"] == 4.0
        assert combined.to_dict()["total"] == 10.0


class TestScenarioCost:
    def test_single_stage(self, cost_grid):
        scenario = constant_scenario(cost_grid, 1, [-50.0])
        policy = Policy.zeros(cost_grid, (0,), 1)
        policy.dispatch[:] = 50.0
        traj = simulate(cost_grid, policy, scenario)
        total, stages = scenario_cost(cost_grid, traj)
        expected = stage_cost(
            cost_grid, traj.state(0), traj.state(1), traj.omega[0], traj.Omega[0],
            LineFlows(cost_grid, traj.flows[0]), 0, 1, settings=traj.settings,
        )
        assert len(stages) == 1
        assert total == expected.total

    def test_penalty_free_is_generation_cost(self, cost_grid, control):
        T = 12
        scenario = constant_scenario(cost_grid, T, [-10.0])
        policy = Policy.zeros(cost_grid, (0,), T)
        policy.dispatch[:] = 10.0
        traj = simulate(cost_grid, policy, scenario, control)
        total, stages = scenario_cost(cost_grid, traj)
        # 12 steps of 10 MW deliver exactly the 10 MWh target
        assert total == pytest.approx(T * (0.01 * 100 + 20 * 10 + 5))
        assert all(stage.total == stage.gen_cost for stage in stages)

    def test_resummation_oracle(self, rng):
        grid = random_grid(rng, 6, limit=150.0, with_nominal=True)
        policy = random_policy(rng, grid, 5)
        traj = simulate(grid, policy, random_scenario(rng, grid, 5))
        total, stages = scenario_cost(grid, traj)
        manual = 0.0
        for t in range(5):
            manual += stage_cost(
                grid, traj.state(t), traj.state(t + 1), traj.omega[t], traj.Omega[t],
                LineFlows(grid, traj.flows[t]), t, 5, gen_ids=traj.gen_ids, settings=traj.settings,
            ).total
        assert total == pytest.approx(manual, rel=1e-12)

    def test_partials_total_matches(self, rng):
        grid = random_grid(rng, 6, limit=150.0, with_nominal=True)
        policy = random_policy(rng, grid, 5)
        traj = simulate(grid, policy, random_scenario(rng, grid, 5))
        total, _ = scenario_cost(grid, traj)
        vectorised, partials = scenario_cost_partials(grid, traj)
        assert vectorised == pytest.approx(total, rel=1e-12)
        assert partials.p_go.shape == traj.p_go.shape
        assert np.all(partials.omega[-1] == 0.0)


class TestEnsembleObjective:
    def test_single_scenario(self, small_ensemble):
        grid, ensemble = small_ensemble
        scenario = ensemble.scenarios[0]
        single = ScenarioSet([replace(scenario, prob=1.0)])
        policy = random_policy(np.random.default_rng(3), grid, 4)
        settings = ControlSettings(horizon=4)
        expected, _ = scenario_cost(grid, simulate(grid, policy, scenario, settings))
        assert ensemble_objective(grid, policy, single, settings) == expected

    def test_identical_pair(self, small_ensemble):
        grid, ensemble = small_ensemble
        scenario = ensemble.scenarios[0]
        pair = ScenarioSet.uniform([scenario, scenario])
        policy = random_policy(np.random.default_rng(3), grid, 4)
        expected, _ = scenario_cost(grid, simulate(grid, policy, scenario))
        assert ensemble_objective(grid, policy, pair) == pytest.approx(expected, rel=1e-15)

    def test_weighted_sum_and_order(self, rng):
        grid = random_grid(rng, 5)
        scenarios = [random_scenario(rng, grid, 3, scenario_id=k) for k in range(3)]
        for s, p in zip(scenarios, (0.5, 0.3, 0.2)):
            s.prob = p
        policy = random_policy(rng, grid, 3)
        costs = [scenario_cost(grid, simulate(grid, policy, s))[0] for s in scenarios]
        expected = 0.5 * costs[0] + 0.3 * costs[1] + 0.2 * costs[2]
        forward = ensemble_objective(grid, policy, ScenarioSet(scenarios))
        backward = ensemble_objective(grid, policy, ScenarioSet(scenarios[::-1]))
        assert forward == pytest.approx(expected, rel=1e-12)
        assert backward == pytest.approx(forward, rel=1e-12)

    def test_probability_check(self):
        check_probabilities([0.25, 0.75])
        with pytest.raises(DimensionError):
            check_probabilities([0.5, 0.4])

    def test_singular_gains_name_scenario(self, two_bus_grid):
        policy = Policy.zeros(two_bus_grid, (0,), 1)
        policy.alpha_F[:] = 1.0
        ensemble = ScenarioSet([constant_scenario(two_bus_grid, 1, [0.0, -10.0], scenario_id=4)])
        with pytest.raises(SimulationError) as excinfo:
            ensemble_objective(two_bus_grid, policy, ensemble)
        assert excinfo.value.scenario_id == 4


class TestViolationCounts:
    def test_counts_by_constraint(self):
        grid = make_grid([-1000.0], [], [{"bus": 0, "p_min": 0.0, "p_max": 5.0}])
        scenario = constant_scenario(grid, 3, [-10.0])
        policy = Policy.zeros(grid, (0,), 3)
        policy.dispatch[:] = 10.0
        traj = simulate(grid, policy, scenario, ControlSettings(horizon=3))
        counts = violation_counts(grid, traj)
        assert counts == {
            "generation": 3,
            "ramp": 0,
            "thermal": 0,
            "frequency": 0,
            "integral_frequency": 0,
            "energy": 0,
        }

    def test_frequency_excursions_counted(self, single_bus_grid):
        scenario = constant_scenario(single_bus_grid, 2, [-50.0])
        traj = simulate(single_bus_grid, Policy.zeros(single_bus_grid, (0,), 2), scenario)
        counts = violation_counts(single_bus_grid, traj)
        # omega = -0.05 Hz on both stages; Omega crosses the band from t = 1
        assert counts["frequency"] == 2
        assert counts["integral_frequency"] == 1
