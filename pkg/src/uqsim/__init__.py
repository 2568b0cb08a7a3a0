"""Simulation-based evaluation of regression uncertainty estimates."""

__version__ = "0.1.0"
