"""Harvest missing lesion annotations from partially labelled CT detections."""

__version__ = "0.1.0"
