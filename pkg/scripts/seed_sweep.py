# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)
"""Run the whole pipeline for several seeds and report per-epsilon medians.

Each seed gets its own output folder (``<output_dir>/seed_<n>``).
"""
import dataclasses
import json
import pathlib

import click

from amc_shapft.tools.evaluation import median_report
from amc_shapft.tools.formats import write_json
from amc_shapft.tools.runner import Workbench
from amc_shapft.tools.utils import RunConfig


def parse_seeds(value):
    try:
        return [int(x.strip()) for x in value.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter(f"not a comma separated list of integers: {value}") from None


def sweep(config_path, seeds, epsilon=None, force=False):
    reports = []
    for seed in seeds:
        config = RunConfig.load(config_path, seed=seed)
        config = dataclasses.replace(
            config, output_dir=str(pathlib.Path(config.output_dir) / f"seed_{seed}")
        )
        print("Processing seed", seed)
        with Workbench(config, force=force) as bench:
            reports.append(bench.pipeline(epsilon))
    return median_report(reports)


@click.command()
@click.option("--config", "config_path", required=True, help="Run configuration")
@click.option("--seeds", default="0,1,2", help="CSV list of seeds")
@click.option("--epsilon", type=float, default=None, help="Single attack level")
@click.option("--output", type=click.Path(), help="Where to write the JSON summary")
@click.option("--force", is_flag=True)
def generate(config_path, seeds, epsilon=None, output=None, force=False):
    summary = sweep(config_path, parse_seeds(seeds), epsilon=epsilon, force=force)
    if output:
        write_json(output, summary)
    click.echo(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    generate()
