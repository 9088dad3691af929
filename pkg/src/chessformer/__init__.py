"""Square-token chess transformer with geometric attention bias."""

__version__ = "0.1.0"
