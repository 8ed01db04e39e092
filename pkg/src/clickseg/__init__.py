"""Click-guided interactive 2D segmentation toolkit."""

__version__ = "0.1.0"
