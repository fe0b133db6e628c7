"""i-vector extraction and stacked auto-encoder speaker recognition toolkit."""

__version__ = "0.1.0"
