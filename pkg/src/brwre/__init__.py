"""Branching random walks in random environment on Z^d: simulation and exact moments."""

__version__ = "0.1.0"
