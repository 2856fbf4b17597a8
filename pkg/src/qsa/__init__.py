"""Spectral challenge-response authentication, simulated classically."""

__version__ = "0.1.0"
