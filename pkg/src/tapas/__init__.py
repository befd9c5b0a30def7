"""Two-pass adaptive negative sampling for large-vocabulary softmax training."""

__version__ = "0.1.0"
