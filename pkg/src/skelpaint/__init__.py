"""Skeleton cloud colorization for self-supervised action representation learning."""

__version__ = "0.1.0"
