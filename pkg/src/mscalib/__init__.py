"""Calibration assessment for transition probabilities of multistate models."""

__version__ = "0.1.0"
