"""Code-graph fusion for small encoder-decoder code generators."""

__version__ = "0.1.0"
