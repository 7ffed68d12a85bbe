"""Intelligibility (STOI, ESTOI) and content accuracy (WER) metrics.

STOI follows Taal et al. (2011) and ESTOI Jensen & Taal (2016): signals are
resampled to 10 kHz, silent frames (more than 40 dB below the loudest frame)
are dropped, 15 one-third-octave band envelopes from 150 Hz are computed on
256-sample Hann frames, and 30-frame (384 ms) segments are compared.
"""
from math import gcd

import numpy as np
from scipy.signal import resample_poly

from . import kernels

FS = 10000
FRAME_LEN = 256
NFFT = 512
N_BANDS = 15
MIN_FREQ = 150
SEGMENT = 30
BETA = -15.0
DYN_RANGE = 40.0
EPS = np.finfo(np.float64).eps


class MetricError(ValueError):
    pass


def third_octave_bands(fs=FS, nfft=NFFT, n_bands=N_BANDS, min_freq=MIN_FREQ):
    """Binary (n_bands, nfft // 2 + 1) matrix grouping FFT bins into bands,
    and the band centre frequencies."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, len(f)))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm, min_freq * 2.0 ** (k / 3)


def _window():
    return np.hanning(FRAME_LEN + 2)[1:-1]


def _frame(x, hop):
    # frame starts run over range(0, len(x) - FRAME_LEN, hop), as in the MATLAB reference
    n = -(-(len(x) - FRAME_LEN) // hop)
    idx = np.arange(FRAME_LEN)[None, :] + hop * np.arange(max(n, 0))[:, None]
    return x[idx]


def _resample_filter(up, down, rejection_db=60.0):
    """Kaiser-windowed sinc anti-aliasing filter with Octave ``resample`` defaults."""
    cutoff = 1.0 / (2 * max(up, down))
    half = np.ceil((rejection_db - 8) / (28.714 * cutoff / 10))
    t = np.arange(-half, half + 1)
    beta = 0.1102 * (rejection_db - 8.7)
    h = np.kaiser(len(t), beta) * 2 * up * cutoff * np.sinc(2 * cutoff * t)
    return h / h.sum()


def resample(x, fs_in, fs_out=FS):
    g = gcd(int(fs_in), int(fs_out))
    up, down = int(fs_out) // g, int(fs_in) // g
    return resample_poly(x, up, down, window=_resample_filter(up, down))


def remove_silent_frames(x, y, dyn_range=DYN_RANGE):
    """Drop frames of ``x`` (and the matching frames of ``y``) more than
    ``dyn_range`` dB below the loudest frame, then overlap-add the rest."""
    hop = FRAME_LEN // 2
    w = _window()
    xf = _frame(x, hop) * w
    yf = _frame(y, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    keep = energy > energy.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    n = len(xf)
    length = (n - 1) * hop + FRAME_LEN if n else 0
    xs, ys = np.zeros(length), np.zeros(length)
    for i in range(n):
        xs[i * hop:i * hop + FRAME_LEN] += xf[i]
        ys[i * hop:i * hop + FRAME_LEN] += yf[i]
    return xs, ys


def _band_envelopes(x):
    frames = _frame(x, FRAME_LEN // 2) * _window()
    spec = np.fft.rfft(frames, n=NFFT, axis=1)
    return np.sqrt(third_octave_bands()[0] @ (np.abs(spec) ** 2).T)


def _prepare(ref, deg, fs):
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    deg = np.asarray(deg, dtype=np.float64).reshape(-1)
    if ref.shape != deg.shape:
        raise MetricError(f"length mismatch: {ref.shape} vs {deg.shape}")
    if fs != FS:
        ref, deg = resample(ref, fs), resample(deg, fs)
    if len(ref) <= FRAME_LEN or not np.any(ref):
        raise MetricError("too short for STOI: no valid segments")
    ref, deg = remove_silent_frames(ref, deg)
    if len(ref) <= FRAME_LEN:
        raise MetricError("too short for STOI: no valid segments")
    x = _band_envelopes(ref)
    y = _band_envelopes(deg)
    if x.shape[1] < SEGMENT:
        raise MetricError(
            f"too short for STOI: {x.shape[1]} frames after silence removal, need {SEGMENT}"
        )
    idx = np.arange(SEGMENT)[None, :] + np.arange(x.shape[1] - SEGMENT + 1)[:, None]
    # (segments, bands, SEGMENT)
    return x[:, idx].transpose(1, 0, 2), y[:, idx].transpose(1, 0, 2)


def _center_unit(a, axis):
    a = a - a.mean(axis=axis, keepdims=True)
    return a / (np.linalg.norm(a, axis=axis, keepdims=True) + EPS)


def stoi(ref, deg, fs=16000):
    """Short-time objective intelligibility of ``deg`` against ``ref``."""
    xs, ys = _prepare(ref, deg, fs)
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS)
    clip = 10 ** (-BETA / 20)
    yp = np.minimum(ys * scale, xs * (1 + clip))
    corr = np.sum(_center_unit(xs, 2) * _center_unit(yp, 2), axis=2)
    return float(corr.mean())


def estoi(ref, deg, fs=16000):
    """Extended STOI: spectro-temporally normalised segment correlations."""
    xs, ys = _prepare(ref, deg, fs)
    xn = _center_unit(_center_unit(xs, 2), 1)
    yn = _center_unit(_center_unit(ys, 2), 1)
    return float(np.sum(xn * yn) / SEGMENT / xs.shape[0])


def wer(ref_text, hyp_text):
    """Word-level edit errors and reference length, after case folding.

    Returns ``(errors, ref_word_count)``; the rate is their quotient and may
    exceed 1 when the hypothesis has insertions.
    """
    ref = ref_text.casefold().split()
    hyp = hyp_text.casefold().split()
    if not ref:
        raise MetricError("empty reference: word error rate undefined")
    ids = {}
    r = [ids.setdefault(w, len(ids)) for w in ref]
    h = [ids.setdefault(w, len(ids)) for w in hyp]
    return kernels.edit_distance(r, h), len(ref)


def word_error_rate(ref_text, hyp_text):
    errors, n = wer(ref_text, hyp_text)
    return errors / n
