import os
import logging
import click
from dotenv import load_dotenv

from app.config import CONFIG_NAME_ENV, LOG_LEVEL_ENV, config
from app.utils.errors import CacheSimError, DataFormatError, InvariantViolation
from app.utils.validation import ValidationError

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class AppGroup(click.Group):
    """
    Click group that turns exceptions into exit codes.

    Handlers are tried in registration order; the first whose type matches wins.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.error_handlers = []

    def errorhandler(self, exc_type):
        def decorator(handler):
            self.error_handlers.append((exc_type, handler))
            return handler
        return decorator

    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise
        except (click.exceptions.Exit, click.exceptions.Abort, click.ClickException):
            raise
        except Exception as e:
            for exc_type, handler in self.error_handlers:
                if isinstance(e, exc_type):
                    ctx.exit(handler(e))
            raise


def create_app(config_name=None):
    """Application factory: returns the click group with every command registered."""
    load_dotenv()

    if config_name is None:
        config_name = os.environ.get(CONFIG_NAME_ENV, 'default')
    if config_name not in config:
        raise ValueError(f"Unknown configuration '{config_name}'")

    level = os.environ.get(LOG_LEVEL_ENV)
    if level:
        logging.getLogger().setLevel(level.upper())

    @click.group(cls=AppGroup)
    @click.option('--verbose', '-v', is_flag=True, help='Log per-request decisions (DEBUG).')
    @click.option('--env', 'env_name', type=click.Choice(sorted(config)), default=config_name,
                  show_default=True, help='Configuration class to start from.')
    @click.pass_context
    def cli(ctx, verbose, env_name):
        """Approximate latent cache simulator."""
        if verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        ctx.ensure_object(dict)
        ctx.obj['config_name'] = env_name

    # Register error handlers
    register_error_handlers(cli)

    # Register CLI commands
    from app.commands import register_cli_commands
    register_cli_commands(cli)

    return cli


def register_error_handlers(cli):
    """Map exception families to exit codes, with a one-line message on stderr."""

    @cli.errorhandler(ValidationError)
    def bad_usage(error):
        logger.warning(f"Invalid input: {error}")
        click.echo(f"Error: {error}", err=True)
        return EXIT_USAGE

    @cli.errorhandler(InvariantViolation)
    def invariant_violation(error):
        logger.error(f"Invariant violated: {error}", exc_info=True)
        click.echo(f"Internal error: {error}", err=True)
        return EXIT_INTERNAL

    @cli.errorhandler(DataFormatError)
    def bad_data(error):
        logger.warning(f"Bad input data: {error}")
        click.echo(f"Error: {error}", err=True)
        return EXIT_DATA

    @cli.errorhandler(OSError)
    def io_error(error):
        logger.warning(f"I/O error: {error}")
        click.echo(f"Error: {error}", err=True)
        return EXIT_DATA

    @cli.errorhandler(CacheSimError)
    def rejected(error):
        logger.warning(f"Run failed: {error}")
        click.echo(f"Error: {error}", err=True)
        return EXIT_USAGE

    @cli.errorhandler(Exception)
    def internal_error(error):
        logger.error(f"Unexpected error: {error}", exc_info=True)
        click.echo("Internal error; see the log for details", err=True)
        return EXIT_INTERNAL
