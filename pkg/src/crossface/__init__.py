"""Cross-pose face identification from single gallery images."""

__version__ = "0.1.0"
