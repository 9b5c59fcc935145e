"""Simulation and certified contraction bounds for functional SDEs with singular drift."""

__version__ = "0.1.0"
