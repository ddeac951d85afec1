"""Particle-filter volatility estimation with a differentiable neural particle filter."""

from svpfrnn.svmodel import PAPER_PARAMS, Dataset, SvParams, VolPath

__all__ = ["PAPER_PARAMS", "Dataset", "SvParams", "VolPath"]
__version__ = "0.1.0"
