"""Extracción de modos coherentes, cuasi-coherentes y transitorios en espectrogramas."""

__version__ = "1.0.0"
