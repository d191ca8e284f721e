"""Backend selection for the XNOR-popcount kernel.

The compiled extension is used when it was built; otherwise, or when
``BIREAL_PURE_PYTHON=1`` is set, the numpy implementation is used.
"""

import os

from . import _binconv_py

if os.environ.get("BIREAL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _binconv_py
    BACKEND = "numpy"
else:
    try:
        from . import _binconv as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _binconv_py
        BACKEND = "numpy"

binconv_rows = _impl.binconv_rows
popcount_xnor = _impl.popcount_xnor


def get_backend(name):
    """Return the kernel module for ``name`` ('cython' or 'numpy')."""
    if name == "numpy":
        return _binconv_py
    if name == "cython":
        from . import _binconv  # type: ignore[attr-defined]

        return _binconv
    raise ValueError(f"unknown backend {name!r}")
