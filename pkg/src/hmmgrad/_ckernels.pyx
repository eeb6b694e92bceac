# Compiled versions of the recursions in _pykernels.py.  Same signatures,
# same tie-breaking (first maximum wins).
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


cdef inline double _lse_row(const double* v, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef double top = -INFINITY
    cdef double s = 0.0
    for i in range(n):
        if v[i] > top:
            top = v[i]
    if top == -INFINITY:
        return -INFINITY
    for i in range(n):
        s += exp(v[i] - top)
    return top + log(s)


def forward(const double[::1] log_pi, const double[:, ::1] log_A, const double[:, ::1] log_b):
    cdef Py_ssize_t T = log_b.shape[0], N = log_b.shape[1]
    cdef Py_ssize_t t, i, j
    cdef double top, s, x
    log_alpha_arr = np.empty((T, N))
    loglik_arr = np.empty(T)
    cdef double[:, ::1] a = log_alpha_arr
    cdef double[::1] ll = loglik_arr
    cdef double[::1] tmp = np.empty(N)
    with nogil:
        for i in range(N):
            a[0, i] = log_pi[i] + log_b[0, i]
        ll[0] = _lse_row(&a[0, 0], N)
        for t in range(1, T):
            for i in range(N):
                for j in range(N):
                    tmp[j] = a[t - 1, j] + log_A[j, i]
                a[t, i] = log_b[t, i] + _lse_row(&tmp[0], N)
            ll[t] = _lse_row(&a[t, 0], N)
    return log_alpha_arr, loglik_arr


def forward_step(const double[::1] log_alpha_prev, const double[:, ::1] log_A, const double[::1] log_b_t):
    cdef Py_ssize_t N = log_b_t.shape[0]
    cdef Py_ssize_t i, j
    out_arr = np.empty(N)
    cdef double[::1] out = out_arr
    cdef double[::1] tmp = np.empty(N)
    cdef double total
    with nogil:
        for i in range(N):
            for j in range(N):
                tmp[j] = log_alpha_prev[j] + log_A[j, i]
            out[i] = log_b_t[i] + _lse_row(&tmp[0], N)
        total = _lse_row(&out[0], N)
    return out_arr, total


def backward(const double[:, ::1] log_A, const double[:, ::1] log_b):
    cdef Py_ssize_t T = log_b.shape[0], N = log_b.shape[1]
    cdef Py_ssize_t t, i, j
    log_beta_arr = np.empty((T, N))
    cdef double[:, ::1] b = log_beta_arr
    cdef double[::1] tmp = np.empty(N)
    with nogil:
        for i in range(N):
            b[T - 1, i] = 0.0
        for t in range(T - 2, -1, -1):
            for i in range(N):
                for j in range(N):
                    tmp[j] = log_A[i, j] + log_b[t + 1, j] + b[t + 1, j]
                b[t, i] = _lse_row(&tmp[0], N)
    return log_beta_arr


def xi_sum(const double[:, ::1] log_alpha, const double[:, ::1] log_beta,
           const double[:, ::1] log_A, const double[:, ::1] log_b, double total):
    cdef Py_ssize_t T = log_b.shape[0], N = log_b.shape[1]
    cdef Py_ssize_t t, i, j
    out_arr = np.zeros((N, N))
    cdef double[:, ::1] out = out_arr
    cdef double x
    with nogil:
        for t in range(T - 1):
            for i in range(N):
                for j in range(N):
                    x = log_alpha[t, i] + log_A[i, j] + log_b[t + 1, j] + log_beta[t + 1, j] - total
                    out[i, j] += exp(x)
    return out_arr


def viterbi(const double[::1] log_pi, const double[:, ::1] log_A, const double[:, ::1] log_b):
    cdef Py_ssize_t T = log_b.shape[0], N = log_b.shape[1]
    cdef Py_ssize_t t, i, j, best
    cdef double score, top
    log_delta_arr = np.empty((T, N))
    backptr_arr = np.zeros((T, N), dtype=np.int64)
    cdef double[:, ::1] d = log_delta_arr
    cdef cnp.int64_t[:, ::1] bp = backptr_arr
    with nogil:
        for i in range(N):
            d[0, i] = log_pi[i] + log_b[0, i]
        for t in range(1, T):
            for i in range(N):
                best = 0
                top = d[t - 1, 0] + log_A[0, i]
                for j in range(1, N):
                    score = d[t - 1, j] + log_A[j, i]
                    if score > top:
                        top = score
                        best = j
                bp[t, i] = best
                d[t, i] = top + log_b[t, i]
    return log_delta_arr, backptr_arr


cdef inline Py_ssize_t _argmax_row(const double[:, ::1] d, Py_ssize_t t) noexcept nogil:
    cdef Py_ssize_t i, best = 0
    cdef double top = d[t, 0]
    for i in range(1, d.shape[1]):
        if d[t, i] > top:
            top = d[t, i]
            best = i
    return best


def backtrack(const double[:, ::1] log_delta, const cnp.int64_t[:, ::1] backptr, Py_ssize_t t):
    path_arr = np.empty(t + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] path = path_arr
    cdef Py_ssize_t s
    with nogil:
        path[t] = _argmax_row(log_delta, t)
        for s in range(t, 0, -1):
            path[s - 1] = backptr[s, path[s]]
    return path_arr


def incremental_paths(const double[:, ::1] log_delta, const cnp.int64_t[:, ::1] backptr):
    cdef Py_ssize_t T = log_delta.shape[0]
    cdef Py_ssize_t t, s
    out_arr = np.full((T, T), -1, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    with nogil:
        for t in range(T):
            out[t, t] = _argmax_row(log_delta, t)
            for s in range(t, 0, -1):
                out[t, s - 1] = backptr[s, out[t, s]]
    return out_arr
