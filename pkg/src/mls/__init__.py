"""Multi-label self-supervised learning with dual order-aligned dictionaries."""

__version__ = "0.1.0"
