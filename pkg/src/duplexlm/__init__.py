"""Two-channel spoken dialogue language modeling over discrete unit streams."""

__version__ = "0.1.0"
