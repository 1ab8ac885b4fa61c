"""Steady states of dissipative spin systems: exact solvers and a variational
transformer density-operator ansatz trained by Monte Carlo."""

__version__ = "0.1.0"
