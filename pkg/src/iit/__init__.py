"""Interchange intervention training: causal models, a tape autodiff core and training objectives."""

__version__ = "0.1.0"
