"""Sequential ensemble cascades with a learned halting selector."""

__version__ = "0.1.0"
