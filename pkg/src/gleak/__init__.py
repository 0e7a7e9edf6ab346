"""Federated gradient-leakage lab: autodiff, FL simulation, passive and active leakage attacks."""

__version__ = "0.1.0"
