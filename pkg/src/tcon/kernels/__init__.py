"""Per-pair co-attention kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``TCON_KERNEL=python`` to force the fallback.
"""

import os

import numpy as np

from . import _fallback

try:
    from . import _coattn_ext as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

BACKEND = "compiled" if _compiled is not None and os.environ.get("TCON_KERNEL") != "python" else "python"


def get_backend(name=None):
    return BACKENDS[name or BACKEND]


def _prep(fs, ft, ass, att, si, ti):
    return (np.ascontiguousarray(fs, dtype=np.float64), np.ascontiguousarray(ft, dtype=np.float64),
            np.ascontiguousarray(ass, dtype=np.float64), np.ascontiguousarray(att, dtype=np.float64),
            np.ascontiguousarray(si, dtype=np.intp), np.ascontiguousarray(ti, dtype=np.intp))


def pair_forward(fs, ft, ass, att, si, ti, backend=None):
    return get_backend(backend).pair_forward(*_prep(fs, ft, ass, att, si, ti))


def pair_backward(fs, ft, ass, att, si, ti, ast, g_raw, backend=None):
    return get_backend(backend).pair_backward(
        *_prep(fs, ft, ass, att, si, ti),
        np.ascontiguousarray(ast, dtype=np.float64), np.ascontiguousarray(g_raw, dtype=np.float64))
