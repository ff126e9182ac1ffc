"""Crop-type ground references from street-level imagery, and the maps trained on them."""

__version__ = "0.1.0"
