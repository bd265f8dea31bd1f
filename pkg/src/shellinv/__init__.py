"""Nonlinear Kirchhoff-Love shells on NURBS patches and adjoint-based load identification."""

__version__ = "0.1.0"
