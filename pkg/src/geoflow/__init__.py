"""Probability-density geodesic flow matching on analytic density fields."""

__version__ = "0.1.0"
