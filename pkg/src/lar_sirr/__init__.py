"""Location-aware single image reflection removal."""

__version__ = "0.1.0"
