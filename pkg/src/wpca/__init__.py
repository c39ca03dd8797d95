"""Training-free scoring and genetic search for small transformer encoders."""

__version__ = "0.1.0"
