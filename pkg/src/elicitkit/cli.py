"""Command-line entry point: ``elicitkit <command> --config run.yaml``."""
from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .config import load_config
from .errors import ElicitError
from .harness import EXPERIMENTS

_PROVIDERS = click.Choice(["http_openai_compatible", "mock", "replay"])


def _run(name: str, config: str, seed: int | None, provider: str | None, output_dir: str | None) -> None:
    try:
        cfg = load_config(config).with_overrides(seed, provider, output_dir)
        report = EXPERIMENTS[name](cfg)
    except ElicitError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    out = report.write(Path(cfg.experiment.output_dir) / cfg.experiment.name / name)
    gw = report.provenance.get("gateway", {})
    click.echo(
        f"{name}: {sum(len(rows) for rows in report.tables.values())} result rows, "
        f"{len(report.failures)} failures, {gw.get('network_calls', 0)} network calls -> {out}"
    )
    sys.exit(0 if report.ok else 1)


def _options(fn):
    fn = click.option("--output-dir", type=click.Path(file_okay=False), help="Override experiment.output_dir.")(fn)
    fn = click.option("--provider", type=_PROVIDERS, help="Override gateway.kind.")(fn)
    fn = click.option("--seed", type=int, help="Override experiment.seed.")(fn)
    fn = click.option("--config", "-c", required=True, type=click.Path(exists=True, dir_okay=False),
                      help="Experiment YAML file.")(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int) -> None:
    """Elicit priors from language models and test them."""
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _command(name: str, help_text: str):
    @_options
    def command(config, seed, provider, output_dir):
        _run(name, config, seed, provider, output_dir)

    command.__doc__ = help_text
    main.command(name)(command)


_command("elicit", "Elicit the mixture prior table.")
_command("fit", "Posterior performance curves for every prior source.")
_command("probe", "Extract in-context priors and posteriors and compare them.")
_command("select", "Bayes-factor selection between elicitation and alternatives.")
_command("memtest", "Header and row memorisation tests.")


@main.command()
@click.argument("experiment", type=click.Choice(sorted(EXPERIMENTS)))
@_options
def replay(experiment, config, seed, provider, output_dir):
    """Rerun EXPERIMENT strictly from the response cache."""
    if provider not in (None, "replay"):
        raise click.UsageError("replay always uses the replay provider")
    _run(experiment, config, seed, "replay", output_dir)


if __name__ == "__main__":
    main()
