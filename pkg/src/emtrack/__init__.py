"""Self-supervised discovery, detection and tracking of moving objects in RGB-D sequences."""

__version__ = "0.1.0"
