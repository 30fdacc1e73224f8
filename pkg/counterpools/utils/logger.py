import sys

from loguru import logger

# The library never installs sinks of its own; it only stays quiet by default.
logger.disable("counterpools")


def configure(level: str = "INFO") -> None:
    """Route counterpools diagnostics to stderr at the given level (CLI use)."""
    logger.remove()
    logger.add(
        sys.stderr,
        level=level.upper(),
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {name}:{function} - {message}",
    )
    logger.enable("counterpools")


def log(message: str, level: str = "INFO") -> None:
    logger.opt(depth=1).log(level.upper(), message)
