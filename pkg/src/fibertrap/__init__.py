"""Simulation and analysis toolkit for a fiber-integrated surface-electrode point Paul trap."""
__version__ = "0.1.0"
