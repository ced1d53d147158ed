"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
``CMLSNN_BACKEND=python`` forces the fallback, ``CMLSNN_BACKEND=cython``
makes a missing extension an import error.
"""

import os

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_choice = os.environ.get("CMLSNN_BACKEND", "auto").lower()
if _choice not in ("auto", "python", "cython"):
    raise ImportError(f"CMLSNN_BACKEND must be auto, python or cython, got {_choice!r}")
if _choice == "cython" and _ckernels is None:
    raise ImportError("CMLSNN_BACKEND=cython but cmlsnn._kernels._ckernels is not built")

if _ckernels is not None and _choice != "python":
    backend = _ckernels
    BACKEND = "cython"
else:
    backend = _fallback
    BACKEND = "python"

BACKENDS = {"python": _fallback}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

im2col = backend.im2col
col2im = backend.col2im
maxpool_fwd = backend.maxpool_fwd
maxpool_bwd = backend.maxpool_bwd
avgpool_fwd = backend.avgpool_fwd
avgpool_bwd = backend.avgpool_bwd
lif_fwd = backend.lif_fwd
lif_bwd = backend.lif_bwd

__all__ = [
    "BACKEND", "BACKENDS", "im2col", "col2im", "maxpool_fwd", "maxpool_bwd",
    "avgpool_fwd", "avgpool_bwd", "lif_fwd", "lif_bwd",
]
