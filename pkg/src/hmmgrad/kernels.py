"""Backend selection for the hot recursions.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy fallback in ``_pykernels`` is used.  Set ``HMMGRAD_BACKEND=python`` to
force the fallback (handy for benchmarking and for cross-checking).
"""
import os

import numpy as np

from . import _pykernels

_requested = os.environ.get("HMMGRAD_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"


def _f(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def forward(log_pi, log_A, log_b, impl=None):
    return (impl or _impl).forward(_f(log_pi), _f(log_A), _f(log_b))


def forward_step(log_alpha_prev, log_A, log_b_t, impl=None):
    return (impl or _impl).forward_step(_f(log_alpha_prev), _f(log_A), _f(log_b_t))


def backward(log_A, log_b, impl=None):
    return (impl or _impl).backward(_f(log_A), _f(log_b))


def xi_sum(log_alpha, log_beta, log_A, log_b, total, impl=None):
    return (impl or _impl).xi_sum(_f(log_alpha), _f(log_beta), _f(log_A), _f(log_b), float(total))


def viterbi(log_pi, log_A, log_b, impl=None):
    return (impl or _impl).viterbi(_f(log_pi), _f(log_A), _f(log_b))


def backtrack(log_delta, backptr, t, impl=None):
    return (impl or _impl).backtrack(_f(log_delta), np.ascontiguousarray(backptr, dtype=np.int64), int(t))


def incremental_paths(log_delta, backptr, impl=None):
    return (impl or _impl).incremental_paths(_f(log_delta), np.ascontiguousarray(backptr, dtype=np.int64))
