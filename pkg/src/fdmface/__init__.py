"""Occlusion-robust face matching by discarding corrupted top-conv feature elements."""

__version__ = "0.1.0"
