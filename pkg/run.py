# Configure logging
import logging

from salientpose import create_cli

logger = logging.getLogger(__name__)

# Create the command group using the factory
cli = create_cli()

if __name__ == "__main__":
    cli(prog_name="salientpose")
