"""Markovian emitter dynamics, photon-number decomposition and figures of merit."""

__version__ = "0.1.0"
