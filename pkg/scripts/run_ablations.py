#!/usr/bin/env python3
"""Ablation sweeps: recurrence steps, guidance weights, and the cov-G schedule.

The cov-G cells are expected to abort at the first timestep (the coefficient
t/(1-t) is singular at t=1); the sweep records those aborts and continues.

Example:
    python scripts/run_ablations.py --out runs/ablation --grid-n 4 --runs 20
"""

import json
from pathlib import Path

import click

from contact_flow.harness import sweep
from contact_flow.scenarios import suite_scenario


@click.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--scenario", "name", default="depth_boxes", show_default=True)
@click.option("--grid-n", type=int, default=16, show_default=True)
@click.option("--runs", type=int, default=50, show_default=True)
def main(out_dir, name, grid_n, runs):
    scenario = suite_scenario(name, n=grid_n)
    out = Path(out_dir)
    rows = sweep(
        scenario,
        out / "recurrence",
        runs=runs,
        recurrence_grid=[1, 3],
    )
    rows += sweep(
        scenario,
        out / "schedule",
        runs=runs,
        schedule_grid=["staged", "covg"],
    )
    rows += sweep(
        scenario,
        out / "lambda",
        runs=runs,
        lambda_grid=[(0.2, 1.0, 0.5), (1.0, 1.0, 1.0), (0.05, 0.25, 0.125)],
    )
    for row in rows:
        click.echo(json.dumps(row))


if __name__ == "__main__":
    main()
