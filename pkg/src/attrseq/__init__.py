"""Sequential multi-attribute recognition over region-feature sequences."""

__version__ = "0.1.0"
