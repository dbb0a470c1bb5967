"""Brownian directed polymer in a Poisson environment and its stochastic heat equation limit."""

__version__ = "0.1.0"
