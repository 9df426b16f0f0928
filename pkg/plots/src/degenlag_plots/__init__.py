"""Batch figure generation for degenlag experiment outputs.

Consumes only the CSV tables and JSON sidecars written by the ``degenlag``
CLI; never imports the simulation package. Five figure kinds are
supported: phase portraits, poloidal (R, Z) orbits, relative energy drift,
training loss traces, and convergence percentile bands.
"""

__version__ = "0.1.0"

from .figures import FigureRecipe, MissingColumnError, plot, poloidal_coordinates

__all__ = ["FigureRecipe", "MissingColumnError", "plot", "poloidal_coordinates", "__version__"]
