"""Process-grounded RL toolkit for multi-turn zoom-in reasoning traces."""

__version__ = "0.1.0"
