"""Integer-only Transformer nonlinearities and reorder-based group quantization."""

__version__ = "0.1.0"
