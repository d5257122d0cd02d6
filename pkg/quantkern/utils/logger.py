"""
Logger configuration module.
"""
import os
import logging
from typing import Optional, Union

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_LEVEL_ENV = 'QUANTKERN_LOG_LEVEL'


def resolve_level(level: Optional[Union[int, str]] = None) -> int:
    """
    Resolve a logging level from an explicit value or the environment.

    Args:
        level: Level as int or name; falls back to QUANTKERN_LOG_LEVEL, then INFO

    Returns:
        Numeric logging level
    """
    if level is None:
        level = os.getenv(LOG_LEVEL_ENV, 'INFO')
    if isinstance(level, str):
        resolved = logging.getLevelName(level.upper())
        if not isinstance(resolved, int):
            raise ValueError(f"Unknown log level: {level}")
        return resolved
    return level


def setup_logger(
    name: Optional[str] = None,
    level: Optional[Union[int, str]] = None,
    log_file: Optional[str] = None,
    console_output: bool = True
) -> logging.Logger:
    """
    Set up a named logger with file and/or console handlers.

    Args:
        name: Logger name
        level: Logging level
        log_file: Path to log file
        console_output: Whether to output logs to the console

    Returns:
        Configured logger
    """
    logger = logging.getLogger(name)
    logger.setLevel(resolve_level(level))
    formatter = logging.Formatter(LOG_FORMAT)

    # Handlers are attached once; repeated CLI invocations in one process reuse them
    if getattr(logger, '_quantkern_configured', False):
        return logger

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir)
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    if console_output:
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    logger._quantkern_configured = True
    return logger


def configure_root_logger(
    level: Optional[Union[int, str]] = None,
    log_file: Optional[str] = None,
    console_output: bool = True
) -> None:
    """
    Configure the root logger for command-line use.

    Args:
        level: Logging level
        log_file: Path to log file
        console_output: Whether to output logs to the console
    """
    handlers = []
    if console_output:
        handlers.append(logging.StreamHandler())
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    if not handlers:
        handlers.append(logging.NullHandler())

    logging.basicConfig(
        level=resolve_level(level),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )
    # wgpu-native is chatty at INFO
    logging.getLogger('wgpu').setLevel(logging.WARNING)
