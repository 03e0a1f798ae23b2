"""Federated prompt tuning over a frozen point-cloud encoder, in numpy."""

__version__ = "0.1.0"
