"""Federated continual test-time adaptation simulator."""

__version__ = "0.1.0"
