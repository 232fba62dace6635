"""Adverse-event risk forecasting from asynchronous remote-monitoring streams."""

__version__ = "0.1.0"
