"""Federated MFPCA feature extraction and (log)-location-scale failure-time regression."""

from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
