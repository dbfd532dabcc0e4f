"""qpix command-line package."""

from qpix import __version__

__all__ = ["__version__"]
