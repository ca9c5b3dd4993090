"""artigen: articulated object generation, alignment, and evaluation toolkit."""

__version__ = "0.1.0"
