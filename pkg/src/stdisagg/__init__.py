"""Spatio-temporal disaggregation of gridded data via sparse GMRF inference."""

__version__ = "0.1.0"
