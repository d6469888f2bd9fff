"""Few-shot generator transfer by adapting per-channel scale/shift statistics."""

__version__ = "0.1.0"
