"""Pseudo-healthy reconstruction evaluation on synthetic brain PET phantoms."""

__version__ = "0.1.0"
