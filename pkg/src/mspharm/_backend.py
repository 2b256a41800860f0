"""Select the kernel backend at import time.

The compiled extension is used when it was built; set ``MSP_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
vol2col = _pykernels.vol2col
col2vol = _pykernels.col2vol

if os.environ.get("MSP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        vol2col = _ckernels.vol2col
        col2vol = _ckernels.col2vol


def get_kernels(name):
    """Return ``(vol2col, col2vol)`` for an explicit backend name."""
    if name == "python":
        return _pykernels.vol2col, _pykernels.col2vol
    if name == "cython":
        from . import _ckernels
        return _ckernels.vol2col, _ckernels.col2vol
    raise ValueError(f"unknown backend {name!r}")
