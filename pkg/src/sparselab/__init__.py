"""Sparse-view neural rendering lab: regularised radiance fields on a numpy autodiff core."""

__version__ = "0.1.0"
