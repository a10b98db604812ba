"""Cross-device hand-to-face gesture sensing toolkit."""

__version__ = "0.1.0"
