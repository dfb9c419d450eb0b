"""Kernel backend selection.

The compiled extension (_core, Cython) and the pure-Python module (pure)
implement the same two classes with identical observable behavior; every
kernel test runs against both.  The compiled one wins when importable;
set NPUSIM_PURE=1 to force the fallback.
"""

import os

if os.environ.get("NPUSIM_PURE"):
    from npusim.kernels.pure import MemCore, WalkerCore
    BACKEND = "pure"
else:
    try:
        from npusim.kernels._core import MemCore, WalkerCore
        BACKEND = "compiled"
    except ImportError:
        from npusim.kernels.pure import MemCore, WalkerCore
        BACKEND = "pure"

__all__ = ["WalkerCore", "MemCore", "BACKEND"]
