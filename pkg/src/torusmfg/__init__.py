"""Monotone mean-field games on the periodic torus: operators, regularizations and solvers."""

__version__ = "0.1.0"
