#!/usr/bin/env python3
"""Command-line entry point: ``python gridflex.py <command> ...``."""

import functools
import json
import logging
import sys
from pathlib import Path

import click

from artifact_store import read_json, write_frame, write_json
from config import DEFAULT_SEED, ControlSettings, OptimizerSettings, setup_logging
from costs import scenario_cost, total_breakdown
from dynamics import simulate, trajectory_summary, trajectory_to_frame
from ensemble_opt import (
    Scheme,
    convexity_probe,
    initial_policy,
    optimize,
    policy_from_dict,
    policy_to_dict,
    scheme_spec,
)
from exceptions import GridflexError, GridValidationError
from grid_model import load_grid
from harness import run_comparison, verify_report
from scenarios import build_ensemble, export_ensemble, import_ensemble

logger = logging.getLogger("gridflex")

SCHEME_CHOICES = [s.value for s in Scheme]


def _guarded(func):
    """Log library errors and exit with status 1 instead of a traceback."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except GridValidationError as exc:
            for violation in exc.violations:
                logger.error(f"invalid grid: {violation}")
            sys.exit(1)
        except GridflexError as exc:
            logger.error(str(exc))
            sys.exit(1)

    return wrapper


def _grid(path, aggregate: bool, control: ControlSettings):
    return load_grid(path, horizon_hours=control.horizon_hours, aggregate=aggregate)


@click.group()
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default from GRIDFLEX_LOG_LEVEL).")
@click.option("--log-file", default=None, type=click.Path(dir_okay=False), help="Also log to this file.")
def cli(log_level, log_file):
    """Ensemble synthesis of distributed generator feedback policies."""
    setup_logging(log_level, log_file)


@cli.command()
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--aggregate", is_flag=True, help="Merge generators sharing a bus.")
@_guarded
def validate(grid_path, aggregate):
    """Parse and validate a grid case."""
    grid = _grid(grid_path, aggregate, ControlSettings())
    click.echo(
        f"OK: {grid.n_buses} buses, {grid.n_lines} lines, {len(grid.generators)} generators "
        f"({len(grid.online_generators)} online), total load response {grid.total_beta:.4g} MW/Hz"
    )


@cli.command("gen-scenarios")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", "grid_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=None, type=int)
@click.option("--aggregate", is_flag=True)
@_guarded
def gen_scenarios(config_path, grid_path, out_dir, seed, aggregate):
    """Generate a scenario ensemble and export it with a manifest."""
    config_path = Path(config_path)
    config = read_json(config_path)
    if grid_path is None:
        if "grid" not in config:
            raise click.UsageError("pass --grid or set 'grid' in the scenario config")
        grid_path = config_path.parent / config["grid"]
    grid = _grid(grid_path, aggregate, ControlSettings())
    ensemble = build_ensemble(config, grid, config_path.parent, seed=seed)
    export_ensemble(ensemble, out_dir)
    click.echo(f"Wrote {len(ensemble)} scenarios to {out_dir}")


@cli.command("optimize")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scenarios", "scen_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--scheme", required=True, type=click.Choice(SCHEME_CHOICES))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--initial", "initial_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", default="adjoint", type=click.Choice(["adjoint", "forward"]))
@click.option("--max-iter", default=None, type=int)
@click.option("--aggregate", is_flag=True)
@_guarded
def optimize_cmd(grid_path, scen_dir, scheme, out_path, initial_path, mode, max_iter, aggregate):
    """Optimise one scheme on every scenario of an exported ensemble."""
    control = ControlSettings()
    grid = _grid(grid_path, aggregate, control)
    ensemble = import_ensemble(scen_dir)
    settings = {"mode": mode}
    if max_iter is not None:
        settings["max_iter"] = max_iter
    if initial_path:
        initial = policy_from_dict(read_json(initial_path), grid)
    else:
        initial = initial_policy(grid, ensemble.scenarios[0], settings=control)
    policy, report = optimize(initial, grid, ensemble, scheme_spec(scheme), OptimizerSettings.from_dict(settings), control)
    out_path = Path(out_path)
    write_json(out_path, policy_to_dict(policy, grid))
    write_json(out_path.with_suffix(".report.json"), report.to_dict())
    click.echo(
        f"{scheme}: objective {report.initial_objective:.6g} -> {report.final_objective:.6g} "
        f"in {report.iterations} iterations ({report.termination})"
    )


@cli.command("simulate")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--policy", "policy_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scenario", "scen_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--scenario-id", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--aggregate", is_flag=True)
@_guarded
def simulate_cmd(grid_path, policy_path, scen_dir, scenario_id, out_path, aggregate):
    """Simulate a policy on one scenario and export the trajectory."""
    control = ControlSettings()
    grid = _grid(grid_path, aggregate, control)
    policy = policy_from_dict(read_json(policy_path), grid)
    scenario = import_ensemble(scen_dir).by_id(scenario_id)
    traj = simulate(grid, policy, scenario, control)
    _, stages = scenario_cost(grid, traj)
    out_path = Path(out_path)
    write_frame(out_path, trajectory_to_frame(grid, traj))
    summary = trajectory_summary(traj, total_breakdown(stages).to_dict())
    write_json(out_path.with_suffix(".summary.json"), summary)
    click.echo(f"max |omega| {traj.max_abs_omega * 1e3:.4f} mHz, cost {summary['cost']['total']:.6g}")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--no-progress", is_flag=True)
@_guarded
def compare(config_path, out_dir, no_progress):
    """Run the four-scheme comparison described by a config file."""
    config_path = Path(config_path)
    report = run_comparison(read_json(config_path), out_dir, base_dir=config_path.parent, progress=not no_progress)
    for row in report.worst_case_table().itertuples(index=False):
        click.echo(f"{row.scheme:>16}  worst |omega| {row.max_abs_omega_hz * 1e3:9.4f} mHz  (scenario {row.scenario_id}, t={row.t})")


@cli.command("verify-report")
@click.argument("report_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--seed", default=None, type=int)
@_guarded
def verify_report_cmd(report_dir, seed):
    """Re-simulate one random scheme/scenario pair of a report."""
    result = verify_report(report_dir, seed)
    click.echo(json.dumps(result, sort_keys=True))


@cli.command("convexity-probe")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scenarios", "scen_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--scheme", default=Scheme.FLOW_P.value, show_default=True, type=click.Choice(SCHEME_CHOICES))
@click.option("--samples", default=50, show_default=True, type=int)
@click.option("--radius", default=0.1, show_default=True, type=float)
@click.option("--seed", default=DEFAULT_SEED, show_default=True, type=int)
@click.option("--aggregate", is_flag=True)
@_guarded
def convexity_probe_cmd(grid_path, scen_dir, scheme, samples, radius, seed, aggregate):
    """Sample midpoint convexity of a scheme's objective around the droop start."""
    control = ControlSettings()
    grid = _grid(grid_path, aggregate, control)
    ensemble = import_ensemble(scen_dir)
    base = initial_policy(grid, ensemble.scenarios[0], settings=control)
    result = convexity_probe(grid, ensemble, scheme_spec(scheme), base, samples, seed, radius, control)
    click.echo(json.dumps(result, sort_keys=True))


if __name__ == "__main__":
    cli()
