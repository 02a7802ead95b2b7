"""Non-adversarial idempotent generative networks on small data."""
__version__ = "0.1.0"
