"""Multi-scale multiple-instance whole-slide classification, desk scale."""

__version__ = "0.1.0"
