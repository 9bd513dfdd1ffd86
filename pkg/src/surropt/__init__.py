"""Surrogate-based black-box optimization toolkit.

Samplers and data handling, neural-network and Gaussian-process surrogates,
exact algebraic formulations of trained models, Delaunay and GP-based
adaptive sampling, embedded NLP/MILP solvers, and campaign drivers for
constrained, multi-objective, and stochastic superstructure optimization.
"""

__version__ = "0.1.0"
