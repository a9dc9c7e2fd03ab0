"""Federated stochastic bilevel optimization with Neumann hypergradient estimators."""

__version__ = "0.1.0"
