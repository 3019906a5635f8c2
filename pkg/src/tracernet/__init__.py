"""Desk-scale workbench for predicting 24-hour CSF tracer images with a U-net."""

__version__ = "0.1.0"
