"""Transformer estimation of a dynamic factor, regularized toward a
Kalman prior, with linear and particle-filter benchmarks."""

__version__ = "0.1.0"
