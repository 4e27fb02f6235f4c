"""Adaptive finite-element solver for two-phase Cahn-Hilliard/Navier-Stokes flow."""

__version__ = "0.1.0"
