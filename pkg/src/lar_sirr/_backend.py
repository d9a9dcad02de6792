"""Select the compiled kernel backend when available.

Set ``LAR_SIRR_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
convolve_padded = _pykernels.convolve_padded

if os.environ.get("LAR_SIRR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        convolve_padded = _ckernels.convolve_padded
