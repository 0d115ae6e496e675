"""Moderate-deviation toolkit for many-server queues."""

__version__ = "0.1.0"
