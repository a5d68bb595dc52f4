"""Simulation and heavy-traffic analysis of a closed bike-sharing network."""

__version__ = "0.1.0"
