"""Multi-stage prediction networks for cross-scanner diffusion MRI harmonization."""

from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
