"""
cli.py
Command-line driver. Library code raises; this module alone turns exceptions
into exit codes: 2 missing artifact, 3 bad config, 4 numeric failure.
"""
import logging
import sys

import click

from histoage import __version__
from histoage.config.settings import PipelineConfig, config_hash, dump_config, load_config
from histoage.pipeline import stages
from histoage.pipeline.artifacts import WorkTree, tree_digest
from histoage.utils.errors import ConfigError, HistoAgeError, MissingArtifactError, NumericFailure
from histoage.utils.log import configure_logging

logger = logging.getLogger("histoage.cli")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_ARTIFACT = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4


def exit_code(error: BaseException) -> int:
    if isinstance(error, MissingArtifactError):
        return EXIT_MISSING_ARTIFACT
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, NumericFailure):
        return EXIT_NUMERIC
    return EXIT_ERROR


def _parse_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(pair, "overrides must look like key=value")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _fail(error: BaseException):
    code = exit_code(error)
    logger.debug("Failure detail", exc_info=error)
    if code == EXIT_ERROR:
        logger.error("Unexpected failure", exc_info=error)
    click.echo(f"Error: {error}", err=True)
    sys.exit(code)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Flat key=value config file.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one config field (repeatable).")
@click.option("--log-level", default=None, help="Logging level (default from HISTOAGE_LOG_LEVEL or INFO).")
@click.version_option(__version__, prog_name="histoage")
@click.pass_context
def cli(ctx, config_path, overrides, log_level):
    """Age prediction from synthetic whole-slide skin images."""
    configure_logging(None, log_level)
    try:
        config = load_config(config_path, _parse_overrides(overrides))
    except HistoAgeError as e:
        _fail(e)
    configure_logging(WorkTree(config.work_dir).logs, log_level)
    ctx.obj = config


def _stage_command(name: str):
    stage = stages.STAGES[name]

    @click.pass_obj
    def command(config: PipelineConfig):
        try:
            outputs = stage(config)
        except (HistoAgeError, FileNotFoundError) as e:
            _fail(e if isinstance(e, HistoAgeError) else MissingArtifactError(e.filename or str(e), name))
        click.echo(f"{name}: {len(outputs)} outputs")

    command.__doc__ = (stage.__doc__ or f"Run the {name} stage.").strip().splitlines()[0]
    return click.command(name)(command)


for _name in stages.STAGES:
    cli.add_command(_stage_command(_name))


@cli.command("run-all")
@click.pass_obj
def run_all(config: PipelineConfig):
    """Run every stage in order."""
    try:
        stages.run_all(config)
    except (HistoAgeError, FileNotFoundError) as e:
        _fail(e if isinstance(e, HistoAgeError) else MissingArtifactError(e.filename or str(e)))
    click.echo(f"run-all complete - tree digest {tree_digest(config.work_dir)}")


@cli.command("digest")
@click.pass_obj
def digest(config: PipelineConfig):
    """Print the determinism digest of the work tree."""
    click.echo(tree_digest(config.work_dir))


@cli.command("show-config")
@click.pass_obj
def show_config(config: PipelineConfig):
    """Print the effective config and its hash."""
    click.echo(dump_config(config), nl=False)
    click.echo(f"# config_hash={config_hash(config)}")


def main(argv=None):
    cli.main(args=argv, prog_name="histoage")


if __name__ == "__main__":
    main()
