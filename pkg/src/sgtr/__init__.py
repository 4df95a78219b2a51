"""Graph-based textual reasoning over character segmentation maps."""

__version__ = "0.1.0"
