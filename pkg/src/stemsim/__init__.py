"""Instrument-focused music similarity with disentangled embedding subspaces."""

from .dataset import CONDITION_NAMES, N_CONDITIONS

__version__ = "0.1.0"

__all__ = ["CONDITION_NAMES", "N_CONDITIONS", "__version__"]
