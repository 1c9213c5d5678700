"""Tiled attention execution and NPU memory-traffic simulation."""

__version__ = "0.1.0"
