"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy kernels.
Set ``FEDPROG_BACKEND=python`` (or ``cython``) to force a choice.
"""

import importlib
import os


def load_backend(name: str = "auto"):
    if name == "python":
        return importlib.import_module("fedprog._kernels_py")
    try:
        return importlib.import_module("fedprog._kernels_cy")
    except ImportError:
        if name == "cython":
            raise
        return importlib.import_module("fedprog._kernels_py")


backend = load_backend(os.environ.get("FEDPROG_BACKEND", "auto"))
BACKEND = backend.BACKEND
