"""Metastability of Glauber dynamics for Ising models with random couplings."""
__version__ = "0.1.0"
