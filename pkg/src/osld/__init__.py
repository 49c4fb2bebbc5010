"""Open-set logo detection: metric learning, logo matching and evaluation."""

__version__ = "0.1.0"
