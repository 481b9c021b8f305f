"""Command-line harness: configuration, experiment commands and output files."""

from .cli import main
from .config import load_config

__all__ = ["main", "load_config"]
