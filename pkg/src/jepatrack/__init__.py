"""Occlusion-aware single-object tracking on synthetic desk-scale scenes."""

__version__ = "0.1.0"
