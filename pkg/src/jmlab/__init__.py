"""Full-duplex spoken dialogue modeling toolkit at desk scale."""

__version__ = "0.1.0"
