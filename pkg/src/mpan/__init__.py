"""Multi-pretext self-supervised few-shot learning, desk scale."""

__version__ = "0.1.0"
