"""Independent reference implementations used only by the tests."""
import itertools
from functools import lru_cache

import numpy as np


def collapse(path, blank=0):
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def ctc_brute_force(probs, target, blank=0):
    """-log sum over every frame-label path whose collapse equals ``target``."""
    T, N = probs.shape
    total = 0.0
    for path in itertools.product(range(N), repeat=T):
        if collapse(path, blank) == tuple(target):
            total += np.prod([probs[t, k] for t, k in enumerate(path)])
    return -np.log(total) if total > 0 else np.inf


def edit_distance_recursive(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def naive_dft_magnitude(frame, n_fft):
    n = np.arange(len(frame))
    k = np.arange(n_fft // 2 + 1)[:, None]
    return np.abs(np.sum(frame[None, :] * np.exp(-2j * np.pi * k * n / n_fft), axis=1))


def central_difference(f, x, idx, eps):
    x_plus = x.copy()
    x_minus = x.copy()
    x_plus[idx] += eps
    x_minus[idx] -= eps
    return (f(x_plus) - f(x_minus)) / (2 * eps)
