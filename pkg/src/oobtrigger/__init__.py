"""Universal out-of-bounding-box adversarial triggers against object detectors."""

__version__ = "0.1.0"
