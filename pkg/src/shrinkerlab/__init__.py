"""Numerical laboratory for perturbed self-shrinkers under (rescaled) mean curvature flow."""

__version__ = "0.1.0"

from .errors import ShrinkerLabError
from .geometry import GeometrySnapshot

__all__ = ["GeometrySnapshot", "ShrinkerLabError", "__version__"]
