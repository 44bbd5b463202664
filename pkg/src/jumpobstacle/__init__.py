"""Obstacle integro-PDE toolkit: reflected-BSDE Monte Carlo and a grid oracle."""

__version__ = "0.1.0"
