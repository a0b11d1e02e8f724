"""Differentiable camera pipeline: unrolled HQS reconstruction trained end to end with a classifier."""

__version__ = "0.1.0"
