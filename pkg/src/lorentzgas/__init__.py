"""Thermostatted periodic Lorentz gas: entropy production and its fluctuation symmetry."""

__version__ = "0.1.0"
