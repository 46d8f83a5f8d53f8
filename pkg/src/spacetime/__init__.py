"""Self-supervised video correspondence on a joint space-time node graph."""

__version__ = "0.1.0"
