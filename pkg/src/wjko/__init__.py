"""Particle JKO schemes for controlled nonlocal transport."""

__version__ = "0.1.0"
