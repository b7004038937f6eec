"""Stochastic heat equation with long-range correlated noise: lattice
simulation, Edwards-Wilkinson limit covariances and diagram power counting."""

__version__ = "0.1.0"
