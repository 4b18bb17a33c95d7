#!/usr/bin/env python3
"""
Wind/load scenario ensembles.

Wind speed series per site are perturbed with seeded Gaussian noise, clamped
at zero and mapped through a turbine power curve to renewable injections.
Scenario 0 is always the unperturbed base forecast.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from artifact_store import read_frame, read_json, write_frame, write_json
from dynamics import economic_dispatch
from exceptions import ScenarioError
from grid_model import BusId, GenId, Grid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PowerCurve:
    """Turbine power curve as a fraction of nameplate."""

    cut_in: float = 3.5  # m/s
    rated: float = 12.0
    cut_out: float = 25.0

    def __post_init__(self):
        if not 0 <= self.cut_in < self.rated <= self.cut_out:
            raise ScenarioError(
                f"power curve needs 0 <= cut_in < rated <= cut_out, got {self.cut_in}, {self.rated}, {self.cut_out}"
            )

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if np.any(v < 0):
            raise ScenarioError(f"wind speed must be non-negative, got {float(v.min())}")
        ramp = np.clip((v - self.cut_in) / (self.rated - self.cut_in), 0.0, 1.0) ** 3
        return np.where((v < self.cut_in) | (v >= self.cut_out), 0.0, ramp)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, float]]) -> "PowerCurve":
        return cls(**(data or {}))


DEFAULT_POWER_CURVE = PowerCurve()


def power_curve(v, curve: PowerCurve = DEFAULT_POWER_CURVE):
    """Fraction of nameplate produced at wind speed ``v`` (m/s)."""
    out = curve(v)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(eq=False)
class WindSite:
    bus: BusId
    nameplate: float  # MW
    speeds: np.ndarray  # m/s, base forecast per t
    noise_std: np.ndarray  # m/s per t
    site_id: int = 0

    def __post_init__(self):
        self.speeds = np.asarray(self.speeds, dtype=float)
        self.noise_std = np.broadcast_to(np.asarray(self.noise_std, dtype=float), self.speeds.shape).copy()
        if self.nameplate <= 0:
            raise ScenarioError(f"site {self.site_id}: nameplate must be positive, got {self.nameplate}")
        if np.any(self.speeds < 0):
            raise ScenarioError(f"site {self.site_id}: wind speeds must be non-negative")
        if np.any(self.noise_std < 0):
            raise ScenarioError(f"site {self.site_id}: noise std must be non-negative")


@dataclass(eq=False)
class Scenario:
    scenario_id: int
    p_R: np.ndarray  # (T+1, n) MW
    p_L0: np.ndarray  # (T+1, n) MW, loads negative
    commitment: Tuple[GenId, ...]
    prob: float
    wind_speeds: Optional[np.ndarray] = None  # (T+1, sites) m/s
    p_fixed: Optional[np.ndarray] = None  # (T+1, n) MW from online units outside the commitment

    def __post_init__(self):
        if self.p_fixed is None:
            self.p_fixed = np.zeros(np.shape(self.p_R))
        elif np.shape(self.p_fixed) != np.shape(self.p_R):
            raise ScenarioError(
                f"scenario {self.scenario_id}: fixed injections have shape {np.shape(self.p_fixed)}, "
                f"expected {np.shape(self.p_R)}"
            )

    @property
    def horizon(self) -> int:
        return self.p_R.shape[0] - 1


@dataclass(eq=False)
class ScenarioSet:
    scenarios: List[Scenario]
    seed: Optional[int] = None

    def __post_init__(self):
        if self.scenarios:
            total = float(sum(s.prob for s in self.scenarios))
            if abs(total - 1.0) > 1e-12:
                raise ScenarioError(f"scenario probabilities sum to {total!r}, expected 1")
            commitments = {tuple(s.commitment) for s in self.scenarios}
            if len(commitments) > 1:
                raise ScenarioError(f"unit commitment differs across the ensemble: {sorted(commitments)}")

    def __len__(self) -> int:
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    @property
    def commitment(self) -> Tuple[GenId, ...]:
        return tuple(self.scenarios[0].commitment) if self.scenarios else ()

    @property
    def horizon(self) -> int:
        return self.scenarios[0].horizon

    def by_id(self, scenario_id: int) -> Scenario:
        for s in self.scenarios:
            if s.scenario_id == scenario_id:
                return s
        raise ScenarioError(f"no scenario with id {scenario_id}")

    @classmethod
    def uniform(cls, scenarios: Sequence[Scenario], seed: Optional[int] = None) -> "ScenarioSet":
        """Copy of ``scenarios`` with probability 1/N each."""
        if not scenarios:
            return cls([], seed)
        prob = 1.0 / len(scenarios)
        return cls([replace(s, prob=prob) for s in scenarios], seed)


def commitment_from_grid(grid: Grid, min_capacity: Optional[float] = None) -> Tuple[GenId, ...]:
    """Online generators, optionally only those with p_max >= min_capacity."""
    gens = grid.online_generators
    if min_capacity is not None:
        gens = tuple(g for g in gens if grid.generators[g].p_max >= min_capacity)
    if not gens:
        raise ScenarioError("unit commitment is empty")
    return gens


def fixed_injections(grid: Grid, commitment: Sequence[GenId], net_demand: np.ndarray) -> np.ndarray:
    """Per-bus output of online units left out of ``commitment``.

    Every online unit is dispatched economically against the horizon-mean
    net demand; units outside the commitment then hold that output for all
    steps. Returns a (T+1, n) matrix.
    """
    net_demand = np.asarray(net_demand, dtype=float)
    online = grid.online_generators
    committed = set(commitment)
    fixed = np.zeros((len(net_demand), grid.n_buses))
    left_out = [g for g in online if g not in committed]
    if not left_out:
        return fixed
    outputs = economic_dispatch(grid, online, float(net_demand.mean()))
    for g, p in zip(online, outputs):
        if g not in committed:
            fixed[:, grid.generators[g].bus] += p
    held = [round(float(p), 2) for g, p in zip(online, outputs) if g not in committed]
    logger.info(f"Holding generators {left_out} at fixed output {held} MW")
    return fixed


def generate_scenarios(
    sites: Sequence[WindSite],
    base_load: np.ndarray,
    commitment: Sequence[GenId],
    count: int,
    seed: int,
    curve: PowerCurve = DEFAULT_POWER_CURVE,
    load_noise_std: float = 0.0,
    p_fixed: Optional[np.ndarray] = None,
) -> ScenarioSet:
    """Scenario k draws its noise from ``default_rng(seed + k)``; scenario 0 is the base.

    ``p_fixed`` is shared by every scenario and defaults to zero.
    """
    base_load = np.asarray(base_load, dtype=float)
    if count < 1:
        raise ScenarioError(f"scenario count must be at least 1, got {count}")
    if base_load.ndim != 2:
        raise ScenarioError(f"base load must be a (T+1, buses) matrix, got shape {base_load.shape}")
    steps, n_buses = base_load.shape
    for site in sites:
        if site.speeds.shape != (steps,):
            raise ScenarioError(
                f"site {site.site_id}: wind series has {site.speeds.shape[0]} samples, load has {steps}"
            )
        if not 0 <= site.bus < n_buses:
            raise ScenarioError(f"site {site.site_id}: bus {site.bus} outside 0..{n_buses - 1}")

    speeds0 = np.column_stack([site.speeds for site in sites]) if sites else np.zeros((steps, 0))
    stds = np.column_stack([site.noise_std for site in sites]) if sites else np.zeros((steps, 0))
    nameplate = np.array([site.nameplate for site in sites], dtype=float)
    has_load = base_load != 0.0

    scenarios = []
    for k in range(count):
        speeds = speeds0.copy()
        load = base_load.copy()
        if k > 0:
            rng = np.random.default_rng(seed + k)
            speeds = np.maximum(speeds0 + stds * rng.standard_normal(speeds0.shape), 0.0)
            if load_noise_std > 0:
                load = load + has_load * rng.normal(0.0, load_noise_std, size=load.shape)
        p_R = np.zeros((steps, n_buses))
        for j, site in enumerate(sites):
            p_R[:, site.bus] += nameplate[j] * curve(speeds[:, j])
        scenarios.append(
            Scenario(
                scenario_id=k,
                p_R=p_R,
                p_L0=load,
                commitment=tuple(commitment),
                prob=1.0 / count,
                wind_speeds=speeds,
                p_fixed=None if p_fixed is None else np.array(p_fixed, dtype=float),
            )
        )
    logger.info(f"Generated {count} scenarios over {len(sites)} wind sites (seed {seed})")
    return ScenarioSet(scenarios, seed)


def split(ensemble: ScenarioSet, n_train: int, seed: int) -> Tuple[ScenarioSet, ScenarioSet]:
    """Seeded disjoint train/validation split, each part renormalised uniformly."""
    N = len(ensemble)
    if not 1 <= n_train < N:
        raise ScenarioError(f"n_train must lie in 1..{N - 1}, got {n_train}")
    order = np.random.default_rng(seed).permutation(N)
    train_idx = sorted(int(i) for i in order[:n_train])
    valid_idx = sorted(int(i) for i in order[n_train:])
    train = ScenarioSet.uniform([ensemble.scenarios[i] for i in train_idx], ensemble.seed)
    validation = ScenarioSet.uniform([ensemble.scenarios[i] for i in valid_idx], ensemble.seed)
    logger.info(
        f"Split {N} scenarios: train {[s.scenario_id for s in train]}, "
        f"validation {[s.scenario_id for s in validation]}"
    )
    return train, validation


# ---------------------------------------------------------------------------
# CSV inputs


def read_load_csv(path, n_buses: int) -> np.ndarray:
    """Load matrix from (t_index, bus_id, value_mw) rows; absent entries are 0."""
    frame = read_frame(path)
    missing = {"t_index", "bus_id", "value_mw"} - set(frame.columns)
    if missing:
        raise ScenarioError(f"{path}: missing columns {sorted(missing)}")
    table = frame.pivot_table(index="t_index", columns="bus_id", values="value_mw", aggfunc="sum")
    if table.index.min() != 0 or list(table.index) != list(range(len(table))):
        raise ScenarioError(f"{path}: t_index must run 0..T without gaps")
    bad = [b for b in table.columns if not 0 <= int(b) < n_buses]
    if bad:
        raise ScenarioError(f"{path}: bus ids {bad} outside 0..{n_buses - 1}")
    table = table.reindex(columns=range(n_buses), fill_value=0.0).fillna(0.0)
    return table.to_numpy(dtype=float)


def read_wind_csv(path) -> pd.DataFrame:
    """Speed table indexed by t_index with one column per site_id."""
    frame = read_frame(path)
    missing = {"t_index", "site_id", "speed_mps"} - set(frame.columns)
    if missing:
        raise ScenarioError(f"{path}: missing columns {sorted(missing)}")
    table = frame.pivot_table(index="t_index", columns="site_id", values="speed_mps", aggfunc="mean")
    if table.isna().any().any():
        raise ScenarioError(f"{path}: wind series have missing samples")
    return table.sort_index()


def build_ensemble(config: Dict[str, Any], grid: Grid, base_dir=".", seed: Optional[int] = None) -> ScenarioSet:
    """Ensemble from a scenario config mapping (sites, CSV inputs, count, seed)."""
    base_dir = Path(base_dir)
    try:
        load_path = base_dir / config["load_csv"]
        wind_path = base_dir / config["wind_csv"]
        site_entries = config["sites"]
    except KeyError as exc:
        raise ScenarioError(f"scenario config missing key {exc.args[0]!r}")

    base_load = read_load_csv(load_path, grid.n_buses)
    speeds = read_wind_csv(wind_path)
    if len(speeds) != base_load.shape[0]:
        raise ScenarioError(f"wind series has {len(speeds)} samples, load has {base_load.shape[0]}")

    sites = []
    for entry in site_entries:
        site_id = int(entry.get("site_id", len(sites)))
        if site_id not in speeds.columns:
            raise ScenarioError(f"no wind series for site {site_id} in {wind_path}")
        sites.append(
            WindSite(
                bus=int(entry["bus"]),
                nameplate=float(entry["nameplate"]),
                speeds=speeds[site_id].to_numpy(dtype=float),
                noise_std=entry.get("noise_std", 0.0),
                site_id=site_id,
            )
        )

    if config.get("commitment") is not None:
        commitment = tuple(sorted(int(g) for g in config["commitment"]))
        offline = [g for g in commitment if not 0 <= g < len(grid.generators) or not grid.generators[g].online]
        if offline:
            raise ScenarioError(f"commitment lists unknown or offline generators {offline}")
    else:
        commitment = commitment_from_grid(grid, config.get("min_capacity"))

    curve = PowerCurve.from_dict(config.get("power_curve"))
    base_wind = sum((site.nameplate * curve(site.speeds) for site in sites), np.zeros(base_load.shape[0]))
    net_demand = -base_load.sum(axis=1) - base_wind
    p_fixed = fixed_injections(grid, commitment, net_demand)

    return generate_scenarios(
        sites,
        base_load,
        commitment,
        count=int(config.get("count", 1)),
        seed=int(seed if seed is not None else config.get("seed", 0)),
        curve=curve,
        load_noise_std=float(config.get("load_noise_std", 0.0)),
        p_fixed=p_fixed,
    )


# ---------------------------------------------------------------------------
# Directory export


def _scenario_frame(scenario: Scenario) -> pd.DataFrame:
    steps, n = scenario.p_R.shape
    return pd.DataFrame(
        {
            "t_index": np.repeat(np.arange(steps), n),
            "bus_id": np.tile(np.arange(n), steps),
            "p_R_mw": scenario.p_R.ravel(),
            "p_L0_mw": scenario.p_L0.ravel(),
            "p_fixed_mw": scenario.p_fixed.ravel(),
        }
    )


def export_ensemble(ensemble: ScenarioSet, directory) -> Path:
    """Per-scenario CSVs plus ``manifest.json`` (probabilities, seed, commitment)."""
    directory = Path(directory)
    entries = []
    for s in ensemble.scenarios:
        name = f"scenario_{s.scenario_id:03d}.csv"
        write_frame(directory / name, _scenario_frame(s))
        entry = {"id": s.scenario_id, "prob": s.prob, "file": name}
        if s.wind_speeds is not None:
            entry["wind_speeds"] = s.wind_speeds
        entries.append(entry)
    manifest = {
        "seed": ensemble.seed,
        "commitment": list(ensemble.commitment),
        "horizon": ensemble.horizon if ensemble.scenarios else None,
        "scenarios": entries,
    }
    path = write_json(directory / "manifest.json", manifest)
    logger.info(f"Exported {len(ensemble)} scenarios to {directory}")
    return path


def import_ensemble(directory) -> ScenarioSet:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ScenarioError(f"no manifest.json in {directory}")
    manifest = read_json(manifest_path)
    commitment = tuple(int(g) for g in manifest["commitment"])
    scenarios = []
    for entry in manifest["scenarios"]:
        frame = read_frame(directory / entry["file"])
        steps = int(frame["t_index"].max()) + 1
        n = int(frame["bus_id"].max()) + 1
        frame = frame.sort_values(["t_index", "bus_id"])
        speeds = entry.get("wind_speeds")
        fixed = frame["p_fixed_mw"].to_numpy(dtype=float).reshape(steps, n) if "p_fixed_mw" in frame else None
        scenarios.append(
            Scenario(
                scenario_id=int(entry["id"]),
                p_R=frame["p_R_mw"].to_numpy(dtype=float).reshape(steps, n),
                p_L0=frame["p_L0_mw"].to_numpy(dtype=float).reshape(steps, n),
                commitment=commitment,
                prob=float(entry["prob"]),
                wind_speeds=np.asarray(speeds, dtype=float) if speeds is not None else None,
                p_fixed=fixed,
            )
        )
    return ScenarioSet(scenarios, manifest.get("seed"))
