"""Time-domain speech bandwidth extension and its speaker-verification evaluation."""

__version__ = "0.1.0"
