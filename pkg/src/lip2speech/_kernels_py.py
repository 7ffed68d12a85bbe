"""Pure-Python/numpy twins of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def ctc_forward_backward(log_probs, target, blank=0):
    log_probs = np.asarray(log_probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    T, N = log_probs.shape
    S = 2 * len(target) + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = target
    # s-2 transitions are legal into non-blank labels that differ from s-2
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    emit = log_probs[:, ext]  # (T, S)
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            a = prev.copy()
            a[1:] = np.logaddexp(a[1:], prev[:-1])
            a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
            alpha[t] = a + emit[t]

        log_p = alpha[-1, -1] if S == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
        grad = np.zeros((T, N))
        if log_p == -np.inf:
            return float("inf"), grad

        beta = np.full((T, S), -np.inf)
        beta[-1, -1] = emit[-1, -1]
        if S > 1:
            beta[-1, -2] = emit[-1, -2]
        skip_back = np.zeros(S, dtype=bool)
        skip_back[:-2] = skip[2:]
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1]
            b = nxt.copy()
            b[:-1] = np.logaddexp(b[:-1], nxt[1:])
            b[:-2] = np.where(skip_back[:-2], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
            beta[t] = b + emit[t]

        ab = alpha + beta - emit
        ab[~np.isfinite(alpha) | ~np.isfinite(beta)] = -np.inf
    for k in np.unique(ext):
        cols = ab[:, ext == k]
        occ = np.logaddexp.reduce(cols, axis=1)
        grad[:, k] = -np.exp(occ - log_p)
    return float(-log_p), grad


def edit_distance(ref, hyp):
    ref = list(ref)
    hyp = list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]
