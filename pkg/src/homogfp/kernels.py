"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise (or when the
environment variable ``HOMOGFP_PURE_PYTHON`` is set to a non-empty value
other than ``0``) the NumPy/SciPy fallback is used.  Both expose the same
three functions.
"""

import os

from . import _kernels_py

_force_py = os.environ.get("HOMOGFP_PURE_PYTHON", "") not in ("", "0")

if _force_py:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"

tridiag_solve = _impl.tridiag_solve
cyclic_tridiag_solve = _impl.cyclic_tridiag_solve
implicit_fp_march_1d = _impl.implicit_fp_march_1d

__all__ = ["BACKEND", "tridiag_solve", "cyclic_tridiag_solve", "implicit_fp_march_1d"]
