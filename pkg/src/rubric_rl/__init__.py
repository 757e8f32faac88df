"""Rubric-guided dialogue synthesis, reward composition and a toy GRPO lab."""

__version__ = "0.1.0"
