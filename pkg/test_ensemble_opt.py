import json
from dataclasses import replace

import numpy as np
import pytest

from config import ControlSettings, OptimizerSettings
from conftest import constant_scenario, make_grid, random_grid, random_policy, random_scenario
from costs import ensemble_objective
from dynamics import Policy, feedback_taps, forecast_dispatch
from ensemble_opt import (
    ALL_SCHEMES,
    BLOCK_ORDER,
    Block,
    OptPass,
    Scheme,
    SchemeSpec,
    convexity_probe,
    initial_policy,
    objective_and_gradient,
    optimize,
    pack,
    parameter_bounds,
    policy_from_dict,
    policy_gradient,
    policy_to_dict,
    scheme_spec,
    unpack,
)
from exceptions import DimensionError, NonFiniteObjectiveError, OptimizationError
from scenarios import ScenarioSet

ALL_BLOCKS = SchemeSpec.custom(BLOCK_ORDER)


def gradient_instance(rng, lag=False):
    """Random small grid with two scenarios and a policy near the forecast balance."""
    n = int(rng.integers(3, 11))
    T = int(rng.integers(1, 7))
    # wide generator limits keep the cubic limit penalty off
    grid = random_grid(
        rng, n, limit=float(rng.uniform(80, 400)), with_nominal=True, horizon_hours=T * 5 / 60,
        p_min=-2000.0, p_max=2000.0,
    )
    scenarios = [random_scenario(rng, grid, T, scenario_id=k, prob=0.5) for k in range(2)]
    policy = random_policy(rng, grid, T)
    base = scenarios[0]
    dispatch = forecast_dispatch(grid, policy.gen_ids, base.p_R, base.p_L0)
    policy.dispatch = dispatch + rng.normal(0.0, 5.0, size=dispatch.shape)
    if lag:
        # keep the lagged loop stable
        policy.alpha_P = -rng.uniform(0.1, 0.5, size=len(policy.gen_ids)) * abs(grid.total_beta) / len(policy.gen_ids)
        policy.alpha_I = -rng.uniform(0.0, 0.2, size=len(policy.gen_ids)) * abs(grid.total_beta) / len(policy.gen_ids)
    settings = ControlSettings(horizon=T, feedback_lag=1 if lag else 0)
    return grid, ScenarioSet(scenarios), policy, settings


def finite_difference(grid, ensemble, spec, policy, settings, h=1e-5):
    v = pack(policy, spec, grid)
    fd = np.zeros(len(v))
    for i in range(len(v)):
        x = v.values.copy()
        step = (x[i] + h) - x[i]
        x[i] += step
        fp, _ = objective_and_gradient(v.with_values(x), grid, ensemble, spec, policy, settings)
        x[i] = v.values[i] - step
        fm, _ = objective_and_gradient(v.with_values(x), grid, ensemble, spec, policy, settings)
        fd[i] = (fp - fm) / (2 * step)
    return fd


@pytest.fixture
def droop_grid():
    """Two buses; only the unit at bus 0 has a speed-regulation limit (-40 MW/Hz)."""
    gens = [{"bus": 0, "p_min": 0.0, "p_max": 120.0, "droop": 0.05}, {"bus": 1, "p_min": 0.0, "p_max": 500.0}]
    return make_grid([-20.0, -30.0], [(0, 1, 0.01, 100.0)], gens, horizon_hours=2 * 5 / 60)


class TestPacking:
    def test_pi_vector_length(self, small_ensemble):
        grid, ensemble = small_ensemble
        policy = initial_policy(grid, ensemble.scenarios[0])
        m, T = len(policy.gen_ids), ensemble.horizon
        assert len(pack(policy, scheme_spec("pi"), grid)) == (T + 1) * m + 2 * m

    def test_flow_p_pins_integral_gain(self, rng, small_ensemble):
        grid, _ = small_ensemble
        policy = random_policy(rng, grid, 4)
        spec = scheme_spec(Scheme.FLOW_P)
        v = pack(policy, spec, grid)
        assert Block.ALPHA_I not in [slot.block for slot in v.layout]
        restored = unpack(v, spec, policy)
        assert np.all(restored.alpha_I == 0.0)
        np.testing.assert_array_equal(restored.alpha_F, policy.alpha_F)

    def test_round_trip_on_free_blocks(self, rng, small_ensemble):
        grid, _ = small_ensemble
        policy = random_policy(rng, grid, 4)
        restored = unpack(pack(policy, ALL_BLOCKS, grid), ALL_BLOCKS, policy.copy())
        for name in ("dispatch", "alpha_P", "alpha_I", "alpha_F"):
            np.testing.assert_array_equal(getattr(restored, name), getattr(policy, name))

    def test_frozen_blocks_come_from_base(self, rng, small_ensemble):
        grid, _ = small_ensemble
        policy = random_policy(rng, grid, 4)
        spec = SchemeSpec.custom([Block.ALPHA_F])
        v = pack(policy, spec, grid)
        restored = unpack(v.with_values(np.zeros(len(v))), spec, policy)
        np.testing.assert_array_equal(restored.dispatch, policy.dispatch)
        np.testing.assert_array_equal(restored.alpha_I, policy.alpha_I)
        assert np.all(restored.alpha_F == 0.0)

    def test_power_of_two_scaling(self, small_ensemble):
        grid, ensemble = small_ensemble
        policy = initial_policy(grid, ensemble.scenarios[0])
        v = pack(policy, ALL_BLOCKS, grid)
        for slot in v.layout:
            assert np.all(np.log2(slot.scale) == np.round(np.log2(slot.scale)))
        gain = 2.0 ** np.round(np.log2(np.abs(grid.beta).sum()))
        limits = np.array([grid.lines[tap.line].thermal_limit for tap in feedback_taps(grid, policy.gen_ids)])
        np.testing.assert_array_equal(v.slot(Block.ALPHA_F).scale, 2.0 ** np.round(np.log2(gain / limits)))

    def test_bounds_only_on_droop_units(self, droop_grid):
        policy = initial_policy(droop_grid, constant_scenario(droop_grid, 2, [-20.0, -30.0]))
        v = pack(policy, ALL_BLOCKS, droop_grid)
        bounds = parameter_bounds(droop_grid, policy, v)
        slot = v.slot(Block.ALPHA_P)
        lower, upper = bounds.lb[slot.slice] * slot.scale, bounds.ub[slot.slice] * slot.scale
        assert lower[0] == pytest.approx(-40.0)
        assert upper[0] == 0.0
        assert lower[1] == -np.inf and upper[1] == np.inf
        rest = np.ones(len(v), dtype=bool)
        rest[slot.slice] = False
        assert np.all(np.isinf(bounds.lb[rest])) and np.all(np.isinf(bounds.ub[rest]))

    def test_length_checked(self, small_ensemble):
        grid, ensemble = small_ensemble
        policy = initial_policy(grid, ensemble.scenarios[0])
        v = pack(policy, ALL_BLOCKS, grid)
        with pytest.raises(DimensionError):
            v.with_values(np.zeros(len(v) + 1))


class TestSchemes:
    def test_pass_structure(self):
        assert [len(scheme_spec(s).passes) for s in ALL_SCHEMES] == [1, 2, 2, 2]
        pi = scheme_spec("pi").passes[0]
        assert Block.ALPHA_F in pi.zeroed
        uncoord = scheme_spec(Scheme.FLOW_PI_UNCOORD)
        assert uncoord.passes[0] == pi
        assert uncoord.passes[1].free == (Block.ALPHA_F,)
        assert uncoord.name == "flow-pi-uncoord"
        coord = scheme_spec(Scheme.FLOW_PI_COORD)
        assert coord.passes[0] == pi
        assert set(coord.passes[1].free) == set(Block)
        flow_p = scheme_spec(Scheme.FLOW_P)
        assert set(flow_p.passes[0].zeroed) == {Block.ALPHA_I, Block.ALPHA_F}
        assert set(flow_p.passes[1].free) == {Block.DISPATCH, Block.ALPHA_P, Block.ALPHA_F}
        assert all(Block.ALPHA_I in p.zeroed for p in flow_p.passes)

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            scheme_spec("pid")
        with pytest.raises(ValueError):
            OptPass((Block.ALPHA_F,), (Block.ALPHA_F,))
        with pytest.raises(ValueError):
            OptPass(())


class TestGradient:
    def test_matches_central_differences(self, rng):
        for _ in range(20):
            grid, ensemble, policy, settings = gradient_instance(rng)
            v = pack(policy, ALL_BLOCKS, grid)
            _, g = objective_and_gradient(v, grid, ensemble, ALL_BLOCKS, policy, settings)
            fd = finite_difference(grid, ensemble, ALL_BLOCKS, policy, settings)
            assert np.max(np.abs(fd - g)) <= 1e-5 * np.max(np.abs(g))

    def test_lagged_feedback_matches_central_differences(self, rng):
        for _ in range(3):
            grid, ensemble, policy, settings = gradient_instance(rng, lag=True)
            v = pack(policy, ALL_BLOCKS, grid)
            _, g = objective_and_gradient(v, grid, ensemble, ALL_BLOCKS, policy, settings)
            fd = finite_difference(grid, ensemble, ALL_BLOCKS, policy, settings)
            assert np.max(np.abs(fd - g)) <= 1e-5 * np.max(np.abs(g))

    @pytest.mark.parametrize("lag", [False, True])
    def test_adjoint_equals_forward(self, rng, lag):
        for _ in range(5):
            grid, ensemble, policy, settings = gradient_instance(rng, lag=lag)
            f_adj, adjoint = policy_gradient(grid, policy, ensemble, settings, mode="adjoint")
            f_fwd, forward = policy_gradient(grid, policy, ensemble, settings, mode="forward")
            assert f_adj == f_fwd
            scale = max(np.max(np.abs(adjoint.block(block)), initial=0.0) for block in Block)
            for block in Block:
                a, b = adjoint.block(block), forward.block(block)
                assert np.max(np.abs(a - b), initial=0.0) <= 1e-9 * scale

    def test_objective_matches_ensemble_objective(self, rng):
        grid, ensemble, policy, settings = gradient_instance(rng)
        f, _ = objective_and_gradient(pack(policy, ALL_BLOCKS, grid), grid, ensemble, ALL_BLOCKS, policy, settings)
        assert f == pytest.approx(ensemble_objective(grid, policy, ensemble, settings), rel=1e-12)

    def test_symmetric_generators(self):
        gens = [{"bus": 1, "c1": 0.01, "c2": 20.0}, {"bus": 2, "c1": 0.01, "c2": 20.0}]
        grid = make_grid([-20.0, -5.0, -5.0], [(1, 0, 0.01, 80.0), (2, 0, 0.01, 80.0)], gens)
        load = [-130.0, 0.0, 0.0]
        scenarios = [constant_scenario(grid, 3, load, wind=[15.0, 0.0, 0.0], scenario_id=k, prob=0.5) for k in range(2)]
        policy = Policy(
            gen_ids=(0, 1),
            dispatch=np.full((4, 2), 60.0),
            alpha_P=np.array([-150.0, -150.0]),
            alpha_I=np.array([-20.0, -20.0]),
            alpha_F=np.array([0.1, 0.1]),
        )
        _, grad = policy_gradient(grid, policy, ScenarioSet(scenarios), ControlSettings(horizon=3))
        np.testing.assert_allclose(grad.dispatch[:, 0], grad.dispatch[:, 1], rtol=1e-9)
        assert grad.alpha_P[0] == pytest.approx(grad.alpha_P[1], rel=1e-9)
        assert grad.alpha_I[0] == pytest.approx(grad.alpha_I[1], rel=1e-9)
        assert grad.alpha_F[0] == pytest.approx(grad.alpha_F[1], rel=1e-9)

    def test_zero_probability_scenario_ignored(self, rng):
        grid, ensemble, policy, settings = gradient_instance(rng)
        first, second = ensemble.scenarios
        alone = ScenarioSet([replace(first, prob=1.0)])
        padded = ScenarioSet([replace(first, prob=1.0), replace(second, prob=0.0)])
        f_alone, g_alone = policy_gradient(grid, policy, alone, settings)
        f_padded, g_padded = policy_gradient(grid, policy, padded, settings)
        assert f_alone == f_padded
        for block in Block:
            np.testing.assert_array_equal(g_alone.block(block), g_padded.block(block))

    def test_non_finite_parameters(self, small_ensemble):
        grid, ensemble = small_ensemble
        policy = initial_policy(grid, ensemble.scenarios[0])
        v = pack(policy, ALL_BLOCKS, grid)
        values = v.values.copy()
        values[0] = np.nan
        with pytest.raises(NonFiniteObjectiveError):
            objective_and_gradient(v.with_values(values), grid, ensemble, ALL_BLOCKS, policy)


@pytest.fixture
def toy():
    """One bus, a 10 MW deficit and nothing but frequency and energy penalties."""
    grid = make_grid([-500.0], [], [{"bus": 0, "c1": 0.0, "c2": 0.0, "energy_target": 0.8}])
    ensemble = ScenarioSet([constant_scenario(grid, 1, [-10.0])])
    return grid, ensemble, Policy.zeros(grid, (0,), 1)


class TestOptimize:
    def test_single_bus_droop(self, toy):
        grid, ensemble, start = toy
        control = ControlSettings(horizon=1)
        spec = SchemeSpec.custom([Block.ALPHA_P], zeroed=[Block.ALPHA_I, Block.ALPHA_F])
        baseline = ensemble_objective(grid, start, ensemble, control)
        policy, report = optimize(start, grid, ensemble, spec, OptimizerSettings(max_iter=200, tol=1e-12), control)

        assert policy.alpha_P[0] < 0
        assert report.initial_objective == pytest.approx(baseline)
        assert report.final_objective < baseline

        best = float("inf")
        for alpha in np.linspace(-1e5, 0.0, 2001):
            candidate = start.copy()
            candidate.alpha_P[:] = alpha
            best = min(best, ensemble_objective(grid, candidate, ensemble, control))
        assert report.final_objective <= best + 1e-6 * baseline

    def test_droop_floor_binds(self):
        gen = {"bus": 0, "c1": 0.0, "c2": 0.0, "energy_target": 0.8, "droop": 0.5}
        grid = make_grid([-500.0], [], [gen])
        ensemble = ScenarioSet([constant_scenario(grid, 1, [-10.0])])
        control = ControlSettings(horizon=1)
        spec = SchemeSpec.custom([Block.ALPHA_P], zeroed=[Block.ALPHA_I, Block.ALPHA_F])
        policy, report = optimize(Policy.zeros(grid, (0,), 1), grid, ensemble, spec, control=control)
        # unconstrained optimum lies far below -1000 / (0.5 * 60)
        assert policy.alpha_P[0] == pytest.approx(-1000.0 / 30.0, rel=1e-9)
        assert report.final_objective < report.initial_objective

    def test_coordinated_starts_at_pi_optimum(self, small_ensemble):
        grid, ensemble = small_ensemble
        control = ControlSettings(horizon=4)
        start = initial_policy(grid, ensemble.scenarios[0], settings=control)
        settings = OptimizerSettings(max_iter=6)
        _, pi_report = optimize(start, grid, ensemble, scheme_spec(Scheme.PI), settings, control)
        _, coord_report = optimize(start, grid, ensemble, scheme_spec(Scheme.FLOW_PI_COORD), settings, control)
        assert coord_report.passes[0].final_objective == pi_report.final_objective
        assert coord_report.passes[1].initial_objective == pi_report.final_objective
        assert coord_report.final_objective <= pi_report.final_objective

    def test_stationary_start(self):
        gen = {"bus": 0, "c1": 0.5, "c2": -10.0, "energy_target": 10.0 * 5.0 / 60.0}
        grid = make_grid([-1000.0], [], [gen])
        ensemble = ScenarioSet([constant_scenario(grid, 1, [-10.0])])
        start = Policy.zeros(grid, (0,), 1)
        start.dispatch[:] = 10.0
        spec = SchemeSpec.custom([Block.DISPATCH, Block.ALPHA_P])
        policy, report = optimize(start, grid, ensemble, spec, control=ControlSettings(horizon=1))
        assert report.iterations <= 2
        assert report.final_objective == report.initial_objective
        np.testing.assert_array_equal(policy.dispatch, start.dispatch)
        assert report.termination == "initial point stationary"

    def test_uncoordinated_passes_chain(self, small_ensemble):
        grid, ensemble = small_ensemble
        control = ControlSettings(horizon=4)
        start = initial_policy(grid, ensemble.scenarios[0], settings=control)
        policy, report = optimize(
            start, grid, ensemble, scheme_spec(Scheme.FLOW_PI_UNCOORD), OptimizerSettings(max_iter=5), control
        )
        first, second = report.passes
        assert second.initial_objective == pytest.approx(first.final_objective, rel=1e-12)
        assert second.free == ["alpha_F"]
        assert report.final_objective <= report.initial_objective

    @pytest.mark.parametrize("scheme", [s.value for s in ALL_SCHEMES])
    def test_trace_nonincreasing(self, small_ensemble, scheme):
        grid, ensemble = small_ensemble
        control = ControlSettings(horizon=4)
        start = initial_policy(grid, ensemble.scenarios[0], settings=control)
        policy, report = optimize(start, grid, ensemble, scheme_spec(scheme), OptimizerSettings(max_iter=8), control)
        trace = report.objective_trace
        assert all(b <= a + 1e-12 * abs(a) for a, b in zip(trace, trace[1:]))
        if scheme == "pi":
            assert np.all(policy.alpha_F == 0.0)
        if scheme == "flow-p":
            assert np.all(policy.alpha_I == 0.0)

    def test_deterministic_reports(self, small_ensemble):
        grid, ensemble = small_ensemble
        control = ControlSettings(horizon=4)
        start = initial_policy(grid, ensemble.scenarios[0], settings=control)
        spec = scheme_spec(Scheme.FLOW_PI_COORD)
        settings = OptimizerSettings(max_iter=6)
        p1, r1 = optimize(start, grid, ensemble, spec, settings, control)
        p2, r2 = optimize(start, grid, ensemble, spec, settings, control)
        assert r1.to_dict(include_runtime=False) == r2.to_dict(include_runtime=False)
        np.testing.assert_array_equal(p1.dispatch, p2.dispatch)
        np.testing.assert_array_equal(p1.alpha_F, p2.alpha_F)

    def test_unsimulable_start(self, two_bus_grid):
        start = Policy.zeros(two_bus_grid, (0,), 1)
        start.alpha_F[:] = 1.0
        ensemble = ScenarioSet([constant_scenario(two_bus_grid, 1, [0.0, -10.0])])
        with pytest.raises(OptimizationError):
            optimize(start, two_bus_grid, ensemble, ALL_BLOCKS, control=ControlSettings(horizon=1))


class TestInitialPolicy:
    def test_forecast_dispatch_and_droop(self, small_ensemble):
        grid, ensemble = small_ensemble
        base = ensemble.scenarios[0]
        policy = initial_policy(grid, base)
        np.testing.assert_allclose(
            policy.dispatch.sum(axis=1), -(base.p_R.sum(axis=1) + base.p_L0.sum(axis=1)), rtol=1e-9
        )
        assert policy.alpha_P.sum() == pytest.approx(-10.0 * np.abs(grid.beta).sum())
        assert np.all(policy.alpha_I == 0.0) and np.all(policy.alpha_F == 0.0)

    def test_droop_capped_at_regulation_limit(self, droop_grid):
        policy = initial_policy(droop_grid, constant_scenario(droop_grid, 2, [-20.0, -30.0]))
        # uniform droop would be -10 * 50 / 2 per unit
        np.testing.assert_allclose(policy.alpha_P, [-40.0, -250.0], rtol=1e-12)


class TestPolicyDocuments:
    def test_round_trip_with_parallel_lines(self, rng):
        lines = [(0, 1, 0.01, 100.0), (1, 0, 0.02, 100.0), (1, 2, 0.01, 100.0)]
        grid = make_grid([-5.0, -5.0, -5.0], lines, [{"bus": 0}, {"bus": 1}])
        policy = random_policy(rng, grid, 3)
        document = json.loads(json.dumps(policy_to_dict(policy, grid)))
        assert set(document["alpha_F"]["1"]) == {"0:0", "0:1", "2"}
        restored = policy_from_dict(document, grid)
        for name in ("dispatch", "alpha_P", "alpha_I", "alpha_F"):
            np.testing.assert_array_equal(getattr(restored, name), getattr(policy, name))

    def test_malformed_document(self, two_bus_grid):
        with pytest.raises(DimensionError):
            policy_from_dict({"gen_ids": [0], "dispatch": [[1.0]]}, two_bus_grid)


def test_convexity_probe_reports_counts(small_ensemble):
    grid, ensemble = small_ensemble
    control = ControlSettings(horizon=4)
    base = initial_policy(grid, ensemble.scenarios[0], settings=control)
    result = convexity_probe(grid, ensemble, scheme_spec(Scheme.FLOW_P), base, samples=3, seed=1, radius=0.01, control=control)
    assert result["tested"] + result["skipped"] == 3
    assert 0 <= result["violations"] <= result["tested"]
    assert result["scheme"] == "flow-p"
