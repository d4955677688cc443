"""Deformable registration for 2D echo-like images with anatomic and
data-driven constraints, a Lucas-Kanade baseline, and a phantom data source."""

__version__ = "0.1.0"

from . import baseline, core, data, losses, metrics, networks, train  # noqa: F401
