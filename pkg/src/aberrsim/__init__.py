"""Ray-traced lens aberration simulation and synthetic-to-real dataset generation."""

__version__ = "0.1.0"
