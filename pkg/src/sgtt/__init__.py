"""Adaptive stochastic Galerkin tensor-train solver for randomly perturbed domains."""

__version__ = "0.1.0"
