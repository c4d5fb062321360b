"""
Configuration module for loading environment variables and flat config files
"""
import logging
import os
from pathlib import Path

from dotenv import load_dotenv

from app.errors import ConfigError

# Load environment variables from .env file
load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Config:
    """Configuration class for the application"""

    # Logging
    LOG_LEVEL: str = os.getenv("STYLIZE_LOG_LEVEL", "INFO")

    # Defaults used when a command is given no explicit value
    DEFAULT_SEED: int = int(os.getenv("STYLIZE_SEED", "0"))
    EVAL_WORKERS: int = int(os.getenv("STYLIZE_EVAL_WORKERS", "1"))
    DATA_DIR: str = os.getenv("STYLIZE_DATA_DIR", "data")

    @classmethod
    def validate(cls) -> list[str]:
        """Validate that the environment-provided configuration is usable"""
        errors = []
        if cls.LOG_LEVEL.upper() not in logging.getLevelNamesMapping():
            errors.append(f"STYLIZE_LOG_LEVEL '{cls.LOG_LEVEL}' is not a logging level")
        if cls.DEFAULT_SEED < 0:
            errors.append("STYLIZE_SEED must be non-negative")
        if cls.EVAL_WORKERS < 1:
            errors.append("STYLIZE_EVAL_WORKERS must be at least 1")
        return errors


config = Config()


def setup_logging(level: str | None = None) -> None:
    """Install a single stream handler on the root logger"""
    logging.basicConfig(
        level=(level or config.LOG_LEVEL).upper(),
        format=LOG_FORMAT,
        force=True,
    )


def load_config_file(path: str | Path, allowed_keys: set[str] | None = None) -> dict[str, str]:
    """
    Parse a flat ``key = value`` config file.

    Blank lines and lines starting with ``#`` are ignored; a trailing
    ``# comment`` after a value is stripped.

    Args:
        path: Config file to read
        allowed_keys: If given, any other key is rejected

    Returns:
        Mapping of key to raw (unparsed) string value

    Raises:
        ConfigError: On unreadable files, malformed lines, duplicate or unknown keys
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e

    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
        if allowed_keys is not None and key not in allowed_keys:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        values[key] = value
    return values
