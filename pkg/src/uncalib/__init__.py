"""Detect drifting sensors in a dense grid by comparing each reading with a
learned prediction from the grid set point."""
from ._backend import BACKEND
from .errors import UncalibError

__version__ = "0.1.0"
__all__ = ["BACKEND", "UncalibError", "__version__"]
