"""moec: extract mixture-of-experts models from trained vision transformers."""

__version__ = "0.1.0"
