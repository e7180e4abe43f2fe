"""spire: desk-scale single-particle-imaging simulation and reconstruction."""

__version__ = "0.1.0"
