"""Pure numpy implementations of the log-space HMM recursions.

These are the reference kernels; ``_ckernels`` must agree with them to
within floating-point rounding.  All arrays are float64, states on the last
axis, ``log_b[t, i] = log b_i(y_t)``.
"""
import numpy as np

NEG_INF = -np.inf


def _lse_axis0(m):
    """logsumexp over axis 0 of a 2-D array, -inf safe."""
    top = m.max(axis=0)
    finite = np.isfinite(top)
    shift = np.where(finite, top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(m - shift).sum(axis=0)) + shift
    out[~finite] = top[~finite]
    return out


def _lse(v):
    top = v.max()
    if top == NEG_INF:
        return NEG_INF
    return top + np.log(np.exp(v - top).sum())


def forward(log_pi, log_A, log_b):
    T, N = log_b.shape
    log_alpha = np.empty((T, N))
    loglik = np.empty(T)
    log_alpha[0] = log_pi + log_b[0]
    loglik[0] = _lse(log_alpha[0])
    for t in range(1, T):
        log_alpha[t] = log_b[t] + _lse_axis0(log_alpha[t - 1][:, None] + log_A)
        loglik[t] = _lse(log_alpha[t])
    return log_alpha, loglik


def forward_step(log_alpha_prev, log_A, log_b_t):
    log_alpha = log_b_t + _lse_axis0(log_alpha_prev[:, None] + log_A)
    return log_alpha, _lse(log_alpha)


def backward(log_A, log_b):
    T, N = log_b.shape
    log_beta = np.empty((T, N))
    log_beta[T - 1] = 0.0
    for t in range(T - 2, -1, -1):
        # rows index the source state i, columns the target j
        log_beta[t] = _lse_axis0((log_A + (log_b[t + 1] + log_beta[t + 1])[None, :]).T)
    return log_beta


def xi_sum(log_alpha, log_beta, log_A, log_b, total):
    """Expected transition counts sum_t P(z_t=i, z_{t+1}=j | y)."""
    T, N = log_b.shape
    if T < 2:
        return np.zeros((N, N))
    log_xi = (
        log_alpha[:-1, :, None]
        + log_A[None, :, :]
        + (log_b[1:] + log_beta[1:])[:, None, :]
        - total
    )
    return np.exp(log_xi).sum(axis=0)


def viterbi(log_pi, log_A, log_b):
    T, N = log_b.shape
    log_delta = np.empty((T, N))
    backptr = np.zeros((T, N), dtype=np.int64)
    log_delta[0] = log_pi + log_b[0]
    for t in range(1, T):
        scores = log_delta[t - 1][:, None] + log_A
        # argmax returns the first maximum, i.e. the lowest state index on ties
        best = scores.argmax(axis=0)
        backptr[t] = best
        log_delta[t] = scores[best, np.arange(N)] + log_b[t]
    return log_delta, backptr


def backtrack(log_delta, backptr, t):
    """Viterbi path for the prefix ending at index ``t`` (inclusive)."""
    path = np.empty(t + 1, dtype=np.int64)
    path[t] = int(log_delta[t].argmax())
    for s in range(t, 0, -1):
        path[s - 1] = backptr[s, path[s]]
    return path


def incremental_paths(log_delta, backptr):
    T = log_delta.shape[0]
    out = np.full((T, T), -1, dtype=np.int64)
    for t in range(T):
        out[t, : t + 1] = backtrack(log_delta, backptr, t)
    return out
