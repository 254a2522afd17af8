"""Kernel backend selection.

The hot numeric kernels exist twice: a Cython extension (`eepipe._ckernels`)
and a numpy fallback (`eepipe._pykernels`).  The extension is used when it
imported successfully; set ``EEPIPE_BACKEND=python`` or ``=compiled`` to force
a choice.  ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import _pykernels

_requested = os.environ.get("EEPIPE_BACKEND", "auto").lower()

_impl = None
if _requested in ("auto", "compiled", "c"):
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = None
        if _requested != "auto":
            raise ImportError(
                "EEPIPE_BACKEND=compiled but eepipe._ckernels is not built; "
                "reinstall with Cython available or use EEPIPE_BACKEND=python"
            )
if _impl is None:
    _impl = _pykernels

BACKEND = "compiled" if _impl is not _pykernels else "python"

gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
rmsnorm_fwd = _impl.rmsnorm_fwd
rmsnorm_bwd = _impl.rmsnorm_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
cross_entropy_fwd = _impl.cross_entropy_fwd
cross_entropy_bwd = _impl.cross_entropy_bwd
attention_fwd = _impl.attention_fwd
attention_bwd = _impl.attention_bwd
dot_rows = _impl.dot_rows
