"""Streaming reasoning runtime with windowed memory, verifiable rewards and GRPO."""

__version__ = "0.1.0"
