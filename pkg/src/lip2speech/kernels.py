"""Dynamic-programming kernels with a compiled backend and a pure-Python fallback.

The Cython extension is used when it has been built; setting the environment
variable ``LIP2SPEECH_PURE_PYTHON=1`` forces the fallback. ``BACKEND`` names
the implementation that was selected.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("LIP2SPEECH_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def ctc_forward_backward(log_probs, target, blank=0):
    """CTC negative log-likelihood of ``target`` under (T, N) ``log_probs``.

    Returns ``(loss, grad)`` where ``grad`` is d loss / d log_probs. The
    computation runs in float64 regardless of the input dtype.
    """
    lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    tgt = np.ascontiguousarray(target, dtype=np.int64)
    return _impl.ctc_forward_backward(lp, tgt, int(blank))


def edit_distance(ref, hyp):
    """Unit-cost Levenshtein distance between two integer sequences."""
    a = np.ascontiguousarray(ref, dtype=np.int64)
    b = np.ascontiguousarray(hyp, dtype=np.int64)
    return int(_impl.edit_distance(a, b))
