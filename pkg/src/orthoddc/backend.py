"""Selects the simulation kernels at import.

The compiled extension is used when it imports; otherwise the numpy
implementation.  Set ``ORTHODDC_BACKEND=python`` to force the fallback.
"""
import os

from . import _pykernels

try:
    from . import _kernels as compiled
except ImportError:  # extension not built
    compiled = None

python = _pykernels

if compiled is not None and os.environ.get("ORTHODDC_BACKEND", "").lower() != "python":
    kernels = compiled
    NAME = "cython"
else:
    kernels = python
    NAME = "python"
