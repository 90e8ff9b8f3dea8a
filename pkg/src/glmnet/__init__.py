"""Graph learning-matching networks on dense numpy tensors."""

__version__ = "0.1.0"
