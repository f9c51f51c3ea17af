"""Multi-agent workflow simulator with group-relative policy optimization."""

__version__ = "0.1.0"
