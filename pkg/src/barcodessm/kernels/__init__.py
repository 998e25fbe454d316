"""Scan kernels with backend selection at import.

The compiled Cython extension is preferred; the numpy reference takes over
when the extension is missing (pure-Python install) or when
BARCODESSM_KERNELS=numpy is set. Both backends implement identical
recurrences (see _scan_np for the definitions) and are cross-checked in the
test suite; a timing comparison lives in benchmarks/bench_scan.py.
"""

from __future__ import annotations

import os

import numpy as np

from . import _scan_np

_forced = os.environ.get("BARCODESSM_KERNELS")
if _forced not in (None, "numpy", "compiled"):
    raise ValueError(f"BARCODESSM_KERNELS must be 'numpy' or 'compiled', got {_forced!r}")

_impl = None
if _forced != "numpy":
    try:
        from . import _scan_cy as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = None
        if _forced == "compiled":
            raise ImportError("compiled scan kernels requested but the extension is not built")

BACKEND = "compiled" if _impl is not None else "numpy"
if _impl is None:
    _impl = _scan_np


def _prep(*arrays):
    dtypes = {a.dtype for a in arrays}
    if len(dtypes) != 1 or arrays[0].dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"scan kernels need one floating dtype, got {sorted(str(d) for d in dtypes)}")
    return [np.ascontiguousarray(a) for a in arrays]


def diag_scan_fwd(u, dt, A, Bm, Cm, D):
    u, dt, A, Bm, Cm, D = _prep(u, dt, A, Bm, Cm, D)
    return _impl.diag_scan_fwd(u, dt, A, Bm, Cm, D)


def diag_scan_bwd(gy, u, dt, A, Bm, Cm, D, h):
    gy, u, dt, A, Bm, Cm, D, h = _prep(gy, u, dt, A, Bm, Cm, D, h)
    return _impl.diag_scan_bwd(gy, u, dt, A, Bm, Cm, D, h)


def headed_scan_fwd(x, dt, A, Bm, Cm, D):
    x, dt, A, Bm, Cm, D = _prep(x, dt, A, Bm, Cm, D)
    return _impl.headed_scan_fwd(x, dt, A, Bm, Cm, D)
