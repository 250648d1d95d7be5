"""Post-processing plots for pilotwave run artifacts (file interface only)."""

__version__ = "0.1.0"

from .io import SchemaError
from .render import PlotJob, plot

__all__ = ["PlotJob", "SchemaError", "plot", "__version__"]
