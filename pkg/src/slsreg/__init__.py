"""Super-level-set regression: minimum-volume conditional prediction regions."""

__version__ = "0.1.0"
