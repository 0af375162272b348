"""Multicontinuum homogenization of Darcy flow and tracer transport.

Constrained cell problems on oversampled regions produce per-block
effective tensors for a coarse multicontinuum system; a fine-grid FEM
reference and a block-average error metric validate the upscaling.
"""

from . import cells, effective, fem, fields, grid, linalg, macro

__version__ = "1.0.0"

__all__ = [
    "cells",
    "effective",
    "fem",
    "fields",
    "grid",
    "linalg",
    "macro",
    "__version__",
]
