#!/usr/bin/env python3
"""
Scheme comparison runner.

generate -> split -> optimise every scheme on the training ensemble ->
simulate the validation ensemble -> report worst-case frequency deviation,
constraint violations and costs.
"""

import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from tqdm import tqdm  # noqa: E402

from artifact_store import ArtifactStore, read_json  # noqa: E402
from config import DEFAULT_SEED, DEFAULT_TRAIN_COUNT, ControlSettings, OptimizerSettings  # noqa: E402
from costs import scenario_cost, total_breakdown, violation_counts  # noqa: E402
from dynamics import Trajectory, forecast_dispatch, simulate, trajectory_to_frame  # noqa: E402
from ensemble_opt import (  # noqa: E402
    ALL_SCHEMES,
    Scheme,
    initial_policy,
    optimize,
    policy_from_dict,
    policy_to_dict,
    scheme_spec,
)
from exceptions import DimensionError, GridflexError, HarnessStageError, ReportVerificationError  # noqa: E402
from grid_model import grid_from_dict, load_grid, serialize_grid, with_energy_targets  # noqa: E402
from scenarios import ScenarioSet, build_ensemble, export_ensemble, import_ensemble, split  # noqa: E402

logger = logging.getLogger(__name__)

VERIFY_RTOL = 1e-9


class WorstCase(NamedTuple):
    max_abs_omega: float
    scenario_id: Optional[int]
    t: int


def worst_case_frequency(trajectories: Sequence[Trajectory]) -> WorstCase:
    """Largest |omega(t)| over all trajectories and steps; first occurrence wins ties."""
    if not trajectories:
        raise DimensionError("worst-case frequency needs at least one trajectory")
    best = WorstCase(-1.0, None, 0)
    for traj in trajectories:
        magnitude = np.abs(traj.omega)
        t = int(np.argmax(magnitude))
        if magnitude[t] > best.max_abs_omega:
            best = WorstCase(float(magnitude[t]), traj.scenario_id, t)
    return best


def worst_case_envelope(trajectories: Sequence[Trajectory]) -> np.ndarray:
    """Per-step maximum of |omega| across trajectories."""
    if not trajectories:
        raise DimensionError("worst-case envelope needs at least one trajectory")
    return np.max(np.abs(np.vstack([traj.omega for traj in trajectories])), axis=0)


@dataclass
class SchemeResult:
    scheme: str
    policy_path: str
    training_objective: float
    initial_training_objective: float
    validation_objective: float
    worst_case: WorstCase
    max_abs_Omega: float
    violations: Dict[str, int]
    generation_cost: float
    cost_breakdown: Dict[str, float]
    validation: List[Dict[str, Any]]
    optimizer: Dict[str, Any]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["worst_case"] = {
            "max_abs_omega_hz": self.worst_case.max_abs_omega,
            "scenario_id": self.worst_case.scenario_id,
            "t": self.worst_case.t,
        }
        return data


@dataclass
class ComparisonReport:
    schemes: Dict[str, SchemeResult] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schemes": {name: result.to_dict() for name, result in self.schemes.items()},
            "metadata": self.metadata,
        }

    def worst_case_table(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "scheme": name,
                    "max_abs_omega_hz": r.worst_case.max_abs_omega,
                    "scenario_id": r.worst_case.scenario_id,
                    "t": r.worst_case.t,
                }
                for name, r in self.schemes.items()
            ],
            columns=["scheme", "max_abs_omega_hz", "scenario_id", "t"],
        )


def config_hash(config: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _stage(name: str, store: ArtifactStore):
    """Context manager turning any failure into HarnessStageError for ``name``."""

    class _Guard:
        def __enter__(self):
            logger.info(f"Stage {name}")
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is None or isinstance(exc, HarnessStageError):
                return False
            if not isinstance(exc, (GridflexError, OSError, ValueError, KeyError)):
                return False
            logger.error(f"Stage {name} failed: {exc}")
            raise HarnessStageError(name, str(exc), store.written) from exc

    return _Guard()


def forecast_energy_targets(grid, base_scenario, control: ControlSettings) -> Dict[int, float]:
    """Energy each committed unit delivers when following the forecast dispatch exactly."""
    gen_ids = tuple(base_scenario.commitment)
    dispatch = forecast_dispatch(grid, gen_ids, base_scenario.p_R, base_scenario.p_L0, base_scenario.p_fixed)
    energy = dispatch[:-1].sum(axis=0) * control.delta_minutes / 60.0
    return {g: float(e) for g, e in zip(gen_ids, energy)}


def _validate_scheme(grid, policy, validation: ScenarioSet, control, store, scheme_dir: str):
    trajectories, records, breakdowns = [], [], []
    violations: Dict[str, int] = {}
    objective = 0.0
    for scenario in validation:
        traj = simulate(grid, policy, scenario, control)
        cost, stages = scenario_cost(grid, traj)
        breakdown = total_breakdown(stages)
        counts = violation_counts(grid, traj)
        for key, value in counts.items():
            violations[key] = violations.get(key, 0) + value
        objective += scenario.prob * cost
        store.write_frame(f"{scheme_dir}/traj_{scenario.scenario_id:03d}.csv", trajectory_to_frame(grid, traj))
        records.append(
            {
                "scenario_id": scenario.scenario_id,
                "max_abs_omega_hz": traj.max_abs_omega,
                "cost": cost,
                "violations": counts,
            }
        )
        trajectories.append(traj)
        breakdowns.append((scenario.prob, breakdown))
    mean_breakdown = {
        key: float(sum(prob * b.to_dict()[key] for prob, b in breakdowns)) for key in breakdowns[0][1].to_dict()
    }
    return trajectories, records, violations, objective, mean_breakdown


def _plot_envelopes(envelopes: Dict[str, np.ndarray], delta_minutes: float) -> bytes:
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, envelope in envelopes.items():
        minutes = np.arange(len(envelope)) * delta_minutes
        ax.plot(minutes, envelope * 1e3, marker="o", label=name)
    ax.set_xlabel("time (min)")
    ax.set_ylabel("worst-case |frequency deviation| (mHz)")
    ax.set_yscale("log")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    buffer = io.BytesIO()
    fig.savefig(buffer, format="png", dpi=120)
    plt.close(fig)
    return buffer.getvalue()


def run_comparison(config: Dict[str, Any], out_dir, base_dir=".", progress: bool = True) -> ComparisonReport:
    """Optimise every configured scheme and score it on the held-out scenarios."""
    base_dir = Path(base_dir)
    store = ArtifactStore(out_dir)
    runtimes: Dict[str, float] = {}
    started = time.perf_counter()
    seed = int(config.get("seed", DEFAULT_SEED))

    with _stage("config", store):
        control = ControlSettings.from_dict(config.get("control"))
        opt_settings = OptimizerSettings.from_dict(config.get("optimizer"))
        schemes = [Scheme(s) for s in config.get("schemes", [s.value for s in ALL_SCHEMES])]
        split_cfg = config.get("split", {})
        n_train = int(split_cfg.get("n_train", DEFAULT_TRAIN_COUNT))
        split_seed = int(split_cfg.get("seed", seed))
        energy_mode = config.get("energy_targets", "case")
        if energy_mode not in ("case", "forecast"):
            raise ValueError(f"energy_targets must be 'case' or 'forecast', got {energy_mode!r}")

    with _stage("grid", store):
        grid = load_grid(base_dir / config["grid"], control.horizon_hours, bool(config.get("aggregate", False)))

    with _stage("generate", store):
        scen_cfg = config["scenarios"]
        scen_dir = base_dir
        if isinstance(scen_cfg, str):
            scen_dir = (base_dir / scen_cfg).parent
            scen_cfg = read_json(base_dir / scen_cfg)
        ensemble = build_ensemble(scen_cfg, grid, scen_dir, seed=seed)
        if ensemble.horizon != control.horizon:
            raise DimensionError(f"scenario horizon {ensemble.horizon} differs from control horizon {control.horizon}")
        if energy_mode == "forecast":
            grid = with_energy_targets(grid, forecast_energy_targets(grid, ensemble.by_id(0), control))
        store.write_bytes("grid.json", serialize_grid(grid).encode())
        export_ensemble(ensemble, store.path("scenarios"))

    with _stage("split", store):
        if n_train >= len(ensemble):
            raise HarnessStageError("split", "empty validation set", store.written)
        train, validation = split(ensemble, n_train, split_seed)

    initial = initial_policy(grid, ensemble.by_id(0), settings=control)
    report = ComparisonReport()
    envelopes: Dict[str, np.ndarray] = {}
    for scheme in tqdm(schemes, desc="schemes", disable=not progress):
        name = scheme.value
        scheme_dir = f"schemes/{name}"
        t0 = time.perf_counter()
        with _stage(f"optimize:{name}", store):
            policy, opt_report = optimize(initial, grid, train, scheme_spec(scheme), opt_settings, control)
            policy_path = store.write_json(f"{scheme_dir}/policy.json", policy_to_dict(policy, grid))
            store.write_json(f"{scheme_dir}/opt_report.json", opt_report.to_dict())
        runtimes[f"optimize:{name}"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        with _stage(f"validate:{name}", store):
            trajectories, records, violations, val_objective, breakdown = _validate_scheme(
                grid, policy, validation, control, store, scheme_dir
            )
            worst = worst_case_frequency(trajectories)
            envelopes[name] = worst_case_envelope(trajectories)
        runtimes[f"validate:{name}"] = time.perf_counter() - t0

        report.schemes[name] = SchemeResult(
            scheme=name,
            policy_path=store.relative(policy_path),
            training_objective=opt_report.final_objective,
            initial_training_objective=opt_report.initial_objective,
            validation_objective=val_objective,
            worst_case=worst,
            max_abs_Omega=float(max(np.max(np.abs(traj.Omega)) for traj in trajectories)),
            violations=violations,
            generation_cost=breakdown["gen_cost"],
            cost_breakdown=breakdown,
            validation=records,
            optimizer=opt_report.to_dict(include_runtime=False),
        )
        logger.info(
            f"{name}: training objective {opt_report.final_objective:.6g}, "
            f"validation worst |omega| {worst.max_abs_omega * 1e3:.3f} mHz (scenario {worst.scenario_id}, t={worst.t})"
        )

    with _stage("report", store):
        store.write_frame("freq_worst_case.csv", report.worst_case_table())
        envelope_frame = pd.DataFrame({"t": np.arange(control.horizon + 1)})
        for name, envelope in envelopes.items():
            envelope_frame[name] = envelope
        store.write_frame("freq_envelope.csv", envelope_frame)
        store.write_bytes("freq_worst_case.png", _plot_envelopes(envelopes, control.delta_minutes))
        runtimes["total"] = time.perf_counter() - started
        report.metadata = {
            "seed": seed,
            "split_seed": split_seed,
            "config_hash": config_hash(config),
            "n_scenarios": len(ensemble),
            "train_ids": [s.scenario_id for s in train],
            "validation_ids": [s.scenario_id for s in validation],
            "energy_targets": energy_mode,
            "control": asdict(control),
            "optimizer": asdict(opt_settings),
            "runtimes": runtimes,
        }
        store.write_json("summary.json", report.to_dict())
    logger.info(f"Comparison report written to {store.root}")
    return report


def verify_report(report_dir, seed: Optional[int] = None) -> Dict[str, Any]:
    """Re-simulate one random (scheme, validation scenario) pair and compare to the report."""
    store = ArtifactStore(report_dir)
    if not store.exists("summary.json"):
        raise ReportVerificationError(f"no summary.json in {store.root}")
    summary = store.read_json("summary.json")
    meta = summary["metadata"]
    control = ControlSettings.from_dict(meta["control"])
    grid = grid_from_dict(store.read_json("grid.json"))
    ensemble = import_ensemble(store.path("scenarios"))

    rng = np.random.default_rng(seed)
    names = sorted(summary["schemes"])
    name = names[int(rng.integers(len(names)))]
    result = summary["schemes"][name]
    record = result["validation"][int(rng.integers(len(result["validation"])))]

    policy = policy_from_dict(store.read_json(result["policy_path"]), grid)
    traj = simulate(grid, policy, ensemble.by_id(record["scenario_id"]), control)
    cost, _ = scenario_cost(grid, traj)

    checks = {
        "max_abs_omega_hz": (record["max_abs_omega_hz"], traj.max_abs_omega),
        "cost": (record["cost"], cost),
    }
    for key, (reported, recomputed) in checks.items():
        if abs(reported - recomputed) > VERIFY_RTOL * max(abs(reported), 1e-12):
            raise ReportVerificationError(
                f"{name} scenario {record['scenario_id']}: {key} reported {reported!r}, recomputed {recomputed!r}"
            )
    logger.info(f"Verified {name} on scenario {record['scenario_id']}")
    return {
        "scheme": name,
        "scenario_id": record["scenario_id"],
        "max_abs_omega_hz": traj.max_abs_omega,
        "cost": cost,
    }
