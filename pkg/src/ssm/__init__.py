"""State-specific model for joint online action detection and anticipation."""

__version__ = "0.1.0"
