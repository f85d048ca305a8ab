"""Stability regions and BackPressure control for networks with stochastic saturation flow."""

__version__ = "0.1.0"
