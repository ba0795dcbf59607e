"""Distributed LQG synthesis with d-delayed localization via column-wise SLS."""

__version__ = "0.1.0"
