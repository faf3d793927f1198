"""Numerical verification of a quadruple-junction cone and its phase-field relaxation."""

__version__ = "0.1.0"
