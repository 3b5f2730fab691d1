"""Semi-supervised NMF-CNN sound event detection toolkit."""

__version__ = "0.1.0"
