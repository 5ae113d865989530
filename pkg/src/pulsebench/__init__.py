"""Few-shot personalization of camera-based pulse measurement."""

__version__ = "0.1.0"
