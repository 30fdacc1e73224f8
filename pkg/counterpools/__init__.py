"""Counter pools: variable-width counters packed into fixed-size memory blocks."""

__version__ = "0.1.0"
