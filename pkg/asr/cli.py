import click
import configparser
import os
import sys
import logging

import asr
from asr.config import CLI_SECTION
from asr.errors import ConfigurationError, ContractError, DimensionError

from .commands import data_commands as d_commands
from .commands import model_commands as m_commands
from .commands import tree_commands as t_commands
from .commands import report_commands as r_commands

logger = logging.getLogger("asrCLI")


def param_fixup(value, config, config_name, option):
    # If already set by an environment or by a command line option, do nothing.
    if value is not None:
        return value

    try:
        return config.get(config_name, option)
    except configparser.Error:
        # Always fail silently.
        return None


class AsrGroup(click.Group):
    """Top-level group that maps failures onto exit codes.

    0 on success, 1 for usage and validation errors, 2 for runtime failures.
    """

    def main(self, args=None, prog_name=None, **extra):
        extra.pop("standalone_mode", None)

        try:
            super().main(args=args, prog_name=prog_name, standalone_mode=False, **extra)
        except click.ClickException as e:
            e.show()
            sys.exit(1)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(1)
        except (ConfigurationError, DimensionError, ContractError) as e:
            logger.error(str(e))
            sys.exit(1)
        except Exception as e:
            logger.error(f"{type(e).__name__}: {e}")
            sys.exit(2)

        sys.exit(0)


def setup_cli_logging(log_level, log_file):
    if log_level is None:
        set_level = logging.INFO
    else:
        set_level = getattr(logging, str(log_level).upper(), None)  # Translate text level to level value.
        if not isinstance(set_level, int):
            raise click.BadParameter(f"unknown log level {log_level}", param_hint="--log_level")

    # Setup logging for CLI operations.
    logger.setLevel(set_level)

    # Repeated invocations in one process (tests) must not stack handlers.
    for log_handler in list(logger.handlers):
        logger.removeHandler(log_handler)

    # Create an explicit console handler to handle just INFO message, i.e.,
    # script output.
    formatter = logging.Formatter("%(message)s")

    ch = logging.StreamHandler(sys.stdout)
    ch.setFormatter(formatter)
    ch.setLevel(logging.INFO)
    logger.addHandler(ch)

    # If the log level is not INFO, create a separate stream
    # for logging additional levels.
    logging_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    formatter = logging.Formatter(logging_format)

    if set_level != logging.INFO:
        other_handler = logging.StreamHandler()
        other_handler.setFormatter(formatter)
        other_handler.setLevel(set_level)
        logger.addHandler(other_handler)

    if log_file is not None:
        # If a log file was specified, log EVERYTHING to the log.
        fh = logging.FileHandler(log_file)
        fh.setFormatter(formatter)
        fh.setLevel(set_level)
        logger.addHandler(fh)


@click.group(cls=AsrGroup, help="Neurosymbolic ellipse autoencoder: data, training, trees and reports")
@click.version_option(asr.__version__, prog_name="asr")
@click.option(
    "--log_level",
    envvar="ASR_LOG",
    type=str,
    required=False,
    help="Level of debugging to display - default = INFO",
)
@click.option(
    "--log_file",
    envvar="asr_log_file",
    type=str,
    required=False,
    help="Output file for logging.",
)
@click.option(
    "--config_file",
    envvar="asr_config_file",
    type=click.Path(exists=True),
    required=False,
    help="Experiment configuration (INI); asr.ini in the current directory is used when present.",
)
@click.pass_context
def cli(ctx, log_level, log_file, config_file):
    # Attempt to locate a configuration file - this is not required, the
    # built-in defaults (asr/data/experiment.ini) apply to anything not set.

    if config_file is None:
        filename = os.path.join(os.getcwd(), "asr.ini")
    else:
        # Click already ensured this is a valid file - if specified.
        filename = config_file

    if os.path.isfile(filename):
        try:
            config = configparser.ConfigParser()
            config.read(filename)
        except configparser.Error:
            click.echo(f"Error accessing configuration file {filename}.")
            sys.exit(1)

        # Priority comes from the command line, then environment variables,
        # and finally the [logging] section of the configuration file.
        log_level = param_fixup(log_level, config, CLI_SECTION, "log_level")
        log_file = param_fixup(log_file, config, CLI_SECTION, "log_file")
    else:
        filename = None

    setup_cli_logging(log_level, log_file)
    asr.set_logging(log_file, log_level)

    logger.debug("completed initialization.")

    ctx.obj = {"config_file": filename}


cli.add_command(d_commands.data_ingest)
cli.add_command(d_commands.data_synth)
cli.add_command(m_commands.model_train)
cli.add_command(m_commands.model_reconstruct)
cli.add_command(m_commands.model_gradcheck)
cli.add_command(t_commands.tree_features)
cli.add_command(t_commands.tree_fit)
cli.add_command(r_commands.report_evaluate)
cli.add_command(r_commands.report_assemble)


def main():
    cli(prog_name="asr")


if __name__ == "__main__":
    main()
