"""Wavefront simulation, per-site GP emulation and Bayesian calibration of arrival dates."""

__version__ = "0.1.0"
