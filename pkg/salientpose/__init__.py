# salientpose/__init__.py
import json
import logging
import os
import sys

import click
from PIL import UnidentifiedImageError

from .config import Config
from .exceptions import InputParseError, SalientPoseError

__version__ = "0.1.0"

logger = logging.getLogger(__name__)

# Exit codes outside the SalientPoseError taxonomy
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_INPUT = 3


def _use_color():
    return False if os.environ.get("NO_COLOR") else None


class CommandFailure(click.ClickException):
    """Carries a classified error to click's top-level handler."""

    def __init__(self, error_name, message, exit_code, json_errors=False):
        super().__init__(message)
        self.error_name = error_name
        self.exit_code = exit_code
        self.json_errors = json_errors

    def show(self, file=None):
        if self.json_errors:
            payload = {"error": self.error_name, "message": self.message, "exit_code": self.exit_code}
            click.echo(json.dumps(payload), err=True)
        else:
            click.secho(f"Error: {self.message}", err=True, fg="red", color=_use_color())


def classify_error(error):
    """Maps an exception to (error name, exit code)."""
    name = type(error).__name__
    if isinstance(error, click.UsageError):
        return name, EXIT_USAGE
    if isinstance(error, click.ClickException):
        return name, error.exit_code
    if isinstance(error, SalientPoseError):
        return name, error.exit_code
    if isinstance(error, (FileNotFoundError, IsADirectoryError, json.JSONDecodeError, UnidentifiedImageError)):
        return name, EXIT_INPUT
    return name, EXIT_UNEXPECTED


class SalientPoseGroup(click.Group):
    """Command group translating library errors into exit codes."""

    def invoke(self, ctx):
        json_errors = bool(ctx.params.get("json_errors"))
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort):
            raise
        except click.ClickException as e:
            if not json_errors:
                raise
            name, code = classify_error(e)
            raise CommandFailure(name, e.format_message(), code, json_errors=True)
        except (SalientPoseError, OSError, json.JSONDecodeError, UnidentifiedImageError) as e:
            name, code = classify_error(e)
            if isinstance(e, OSError) and code == EXIT_UNEXPECTED:
                logger.error(f"I/O error: {e}", exc_info=True)
            else:
                logger.debug(f"{name}: {e}")
            raise CommandFailure(name, str(e), code, json_errors=json_errors)
        except Exception as e:
            logger.error(f"An unexpected error occurred: {e}", exc_info=True)
            raise CommandFailure(type(e).__name__, str(e), EXIT_UNEXPECTED, json_errors=json_errors)


def configure_logging(level):
    # Ensure basicConfig is only called once if the CLI is invoked repeatedly in-process
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(
            level=level,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
    root.setLevel(level)


def create_cli():
    """Create and configure the salientpose command group."""

    @click.group(cls=SalientPoseGroup, context_settings={"help_option_names": ["-h", "--help"]})
    @click.version_option(__version__, prog_name="salientpose")
    @click.option("--config", "config_path", type=click.Path(dir_okay=False),
                  help="JSON settings file (flat, or keyed by command name).")
    @click.option("--jobs", type=click.IntRange(min=1), default=None, help="Worker threads for gen and eval.")
    @click.option("--json-errors", is_flag=True, help="Print errors as one JSON object on stderr.")
    @click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
                  default=Config.LOG_LEVEL, show_default=True)
    @click.pass_context
    def cli(ctx, config_path, jobs, json_errors, log_level):
        """Keypoint saliency, BOP pose metrics and scene generation."""
        configure_logging(log_level.upper())
        ctx.ensure_object(dict)
        ctx.obj.update({"config_path": config_path, "jobs": jobs, "json_errors": json_errors})

    # --- Register Commands ---
    from .commands import eval_commands, gen_commands, keypoint_commands
    cli.add_command(keypoint_commands.keypoints)
    cli.add_command(keypoint_commands.heatmap)
    cli.add_command(keypoint_commands.render)
    cli.add_command(gen_commands.gen)
    cli.add_command(eval_commands.evaluate)
    logger.debug("Registered commands: keypoints, heatmap, render, gen, eval")
    return cli
