"""Populated-region analysis and region-regularised robust training for small ReLU nets."""

__version__ = "0.1.0"
