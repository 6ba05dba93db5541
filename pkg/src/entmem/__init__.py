"""Entity-indexed sparse memory for multi-shot video generation, at desk scale."""

__version__ = "0.1.0"
