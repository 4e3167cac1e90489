"""Misalignment-robust super-resolution training via mimicked-LR generation."""

__version__ = "0.1.0"
