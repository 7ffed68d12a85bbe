# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dynamic-programming kernels (CTC forward-backward, edit distance)."""
import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, log1p

cnp.import_array()


cdef inline double _logadd(double a, double b) noexcept nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def ctc_forward_backward(const double[:, ::1] log_probs, const long long[::1] target,
                         long long blank=0):
    """Negative log-likelihood and its gradient w.r.t. ``log_probs``.

    ``log_probs`` is (T, N) log-probabilities, ``target`` a label sequence
    without blanks. Returns ``(loss, grad)`` with ``grad`` shaped like
    ``log_probs``. An impossible alignment gives ``loss = inf`` and zero grad.
    """
    cdef Py_ssize_t T = log_probs.shape[0]
    cdef Py_ssize_t N = log_probs.shape[1]
    cdef Py_ssize_t L = target.shape[0]
    cdef Py_ssize_t S = 2 * L + 1
    cdef Py_ssize_t t, s, k
    cdef long long lab
    cdef double a, ab, log_p

    ext_np = np.empty(S, dtype=np.int64)
    cdef long long[::1] ext = ext_np
    for s in range(S):
        ext[s] = blank if s % 2 == 0 else target[(s - 1) // 2]

    alpha_np = np.full((T, S), -np.inf)
    beta_np = np.full((T, S), -np.inf)
    occ_np = np.full((T, N), -np.inf)
    grad_np = np.zeros((T, N))
    cdef double[:, ::1] alpha = alpha_np
    cdef double[:, ::1] beta = beta_np
    cdef double[:, ::1] occ = occ_np
    cdef double[:, ::1] grad = grad_np

    with nogil:
        alpha[0, 0] = log_probs[0, ext[0]]
        if S > 1:
            alpha[0, 1] = log_probs[0, ext[1]]
        for t in range(1, T):
            for s in range(S):
                a = alpha[t - 1, s]
                if s >= 1:
                    a = _logadd(a, alpha[t - 1, s - 1])
                if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                    a = _logadd(a, alpha[t - 1, s - 2])
                if a != -INFINITY:
                    alpha[t, s] = a + log_probs[t, ext[s]]

        log_p = alpha[T - 1, S - 1]
        if S > 1:
            log_p = _logadd(log_p, alpha[T - 1, S - 2])

    if log_p == -INFINITY:
        return float("inf"), grad_np

    with nogil:
        beta[T - 1, S - 1] = log_probs[T - 1, ext[S - 1]]
        if S > 1:
            beta[T - 1, S - 2] = log_probs[T - 1, ext[S - 2]]
        for t in range(T - 2, -1, -1):
            for s in range(S):
                a = beta[t + 1, s]
                if s + 1 < S:
                    a = _logadd(a, beta[t + 1, s + 1])
                if s + 2 < S and ext[s] != blank and ext[s + 2] != ext[s]:
                    a = _logadd(a, beta[t + 1, s + 2])
                if a != -INFINITY:
                    beta[t, s] = a + log_probs[t, ext[s]]

        for t in range(T):
            for s in range(S):
                if alpha[t, s] == -INFINITY or beta[t, s] == -INFINITY:
                    continue
                lab = ext[s]
                ab = alpha[t, s] + beta[t, s] - log_probs[t, lab]
                occ[t, lab] = _logadd(occ[t, lab], ab)
            for k in range(N):
                if occ[t, k] != -INFINITY:
                    grad[t, k] = -exp(occ[t, k] - log_p)

    return -log_p, grad_np


def edit_distance(const long long[::1] ref, const long long[::1] hyp):
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    cdef Py_ssize_t n = ref.shape[0]
    cdef Py_ssize_t m = hyp.shape[0]
    cdef Py_ssize_t i, j
    cdef long long sub, best
    prev_np = np.arange(m + 1, dtype=np.int64)
    cur_np = np.empty(m + 1, dtype=np.int64)
    cdef long long[::1] prev = prev_np
    cdef long long[::1] cur = cur_np
    cdef long long[::1] tmp
    with nogil:
        for i in range(1, n + 1):
            cur[0] = i
            for j in range(1, m + 1):
                sub = prev[j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
                best = prev[j] + 1
                if cur[j - 1] + 1 < best:
                    best = cur[j - 1] + 1
                if sub < best:
                    best = sub
                cur[j] = best
            tmp = prev
            prev = cur
            cur = tmp
    return int(prev[m])
