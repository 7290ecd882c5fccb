"""Trajectory prediction with a frozen, LoRA-adapted transformer backbone."""

__version__ = "0.1.0"
