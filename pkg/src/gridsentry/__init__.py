"""Robust graph-based intrusion detection for energy-IoT flow networks."""

__version__ = "0.1.0"
