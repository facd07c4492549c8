# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)

import functools
import logging
import sys

import click

from ..tools import runner
from ..tools.evaluation import ARMS, eps_tag
from ..tools.exceptions import AmcError
from ..tools.utils import RunConfig

_logger = logging.getLogger(__name__)

EXIT_USAGE = 1


class WorkbenchGroup(click.Group):
    """Maps failures onto exit codes: 1 usage/config, 2 data, 3 numerical."""

    def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False
        try:
            code = super().main(*args, **kwargs)
        except click.ClickException as err:
            err.show()
            sys.exit(EXIT_USAGE)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_USAGE)
        except AmcError as err:
            _logger.error("%s", err)
            sys.exit(err.exit_code)
        sys.exit(code if isinstance(code, int) else 0)


def run_options(func):
    @click.option(
        "--config",
        "config_path",
        required=True,
        type=click.Path(dir_okay=True),
        help="Run configuration (YAML file or folder of YAML files)",
    )
    @click.option("--force", is_flag=True, help="Rebuild artifacts even if up to date.")
    @click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
    @click.option("--seed", type=int, default=None, help="Override the master seed.")
    @functools.wraps(func)
    def wrapper(config_path, force, verbose, seed, **kwargs):
        if verbose:
            logging.getLogger().setLevel(logging.DEBUG)
            runner.handler.setLevel(logging.DEBUG)
        config = RunConfig.load(config_path, seed=seed)
        with runner.Workbench(config, force=force) as bench:
            return func(bench, **kwargs)

    return wrapper


epsilon_option = click.option(
    "--epsilon",
    type=float,
    default=None,
    help="Attack level to process (default: every level of the configuration).",
)


def _echo_comparison(report):
    click.echo("epsilon  " + "  ".join(f"{arm:>9}" for arm in ARMS))
    for row in report.rows:
        cells = "  ".join(f"{row.adversarial[arm]:9.4f}" for arm in ARMS)
        click.echo(f"{eps_tag(row.epsilon):<8} {cells}")


@click.group(cls=WorkbenchGroup)
def cli():
    """Modulation classifier robustness workbench."""


@cli.command()
@run_options
def synth(bench):
    """Generate the tiny_train, tiny_test and adv_data splits."""
    bench.synth()


@cli.command()
@run_options
def train(bench):
    """Train the classifier on tiny_train."""
    bench.train()


@cli.command()
@run_options
@epsilon_option
def attack(bench, epsilon):
    """FGSM-attack tiny_test and adv_data."""
    bench.attack(epsilon)


@cli.command()
@run_options
@epsilon_option
def explain(bench, epsilon):
    """Expected-gradients attributions of tiny_adv."""
    bench.explain(epsilon)


@cli.command()
@run_options
@epsilon_option
def defend(bench, epsilon):
    """Negative-point pruning and fine-tuning."""
    bench.defend(epsilon)


@cli.command()
@run_options
@click.option("--model", "model_path", type=click.Path(), help="Model checkpoint.")
@click.option("--dataset", "dataset_path", type=click.Path(), help="Dataset file.")
def evaluate(bench, model_path, dataset_path):
    """Accuracy and confusion matrix of a model on a dataset."""
    report = bench.evaluate(model_path, dataset_path)
    click.echo(f"accuracy {report['accuracy']:.4f}")


@cli.command()
@run_options
@epsilon_option
def compare(bench, epsilon):
    """Original, AT-FGSM, direct fine-tune and SHAP-FT on adv_data."""
    _echo_comparison(bench.compare(epsilon))


@cli.command()
@run_options
@epsilon_option
def pipeline(bench, epsilon):
    """Every stage, from synthesis to figures."""
    _echo_comparison(bench.pipeline(epsilon))


@cli.command()
@run_options
@epsilon_option
def figures(bench, epsilon):
    """Attribution curves, heatmap and confusion matrices (CSV and SVG)."""
    bench.figures(epsilon)


if __name__ == "__main__":
    cli()
