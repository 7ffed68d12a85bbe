"""Waveform <-> spectrogram transforms, mel filtering and Griffin-Lim vocoding.

Framing convention (fixed, used everywhere): a periodic Hann window of
``win_length`` samples slides by ``hop_length`` with no padding, so a signal
of ``n`` samples yields ``floor((n - win_length) / hop_length) + 1`` frames.
``mel_spectrogram(..., aligned=True)`` zero-pads ``(win - hop) / 2`` samples
on both sides first, which gives exactly ``n // hop_length`` frames with frame
``i`` centred on the ``i``-th hop interval. Corpus mels use the aligned form so
that a 25 fps video of ``T`` frames maps onto ``4 * T`` mel frames.
"""
import functools
import wave as _wave
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    window_ms: float = 40.0
    hop_ms: float = 10.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.hop_ms <= 0 or self.hop_ms > self.window_ms:
            raise ValueError("need 0 < hop_ms <= window_ms")

    @property
    def win_length(self):
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop_length(self):
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def n_fft(self):
        return 1 << (self.win_length - 1).bit_length()

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop_length


@dataclass(frozen=True)
class MelConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not 0 <= self.fmin < self.fmax <= self.stft.sample_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= sample_rate / 2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def n_frames(n_samples, cfg):
    if n_samples < cfg.win_length:
        return 0
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


@functools.lru_cache(maxsize=8)
def analysis_window(win_length):
    w = get_window("hann", win_length, fftbins=True)
    w.setflags(write=False)
    return w


def _frames(x, cfg):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if len(x) < cfg.win_length:
        raise ValueError(f"input too short: {len(x)} samples < window of {cfg.win_length}")
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)
    return view[::cfg.hop_length]


def stft(x, cfg=StftConfig()):
    """Complex STFT, shape (frames, n_fft // 2 + 1)."""
    frames = _frames(x, cfg) * analysis_window(cfg.win_length)
    return np.fft.rfft(frames, n=cfg.n_fft, axis=-1)


def istft(spec, cfg=StftConfig()):
    """Least-squares inverse of :func:`stft`.

    Output length is ``(frames - 1) * hop + win``. Samples with zero window
    coverage are returned as 0.
    """
    spec = np.asarray(spec)
    n = spec.shape[0]
    win, hop = cfg.win_length, cfg.hop_length
    w = analysis_window(win)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=-1)[:, :win] * w
    length = (n - 1) * hop + win
    out = np.zeros(length)
    norm = np.zeros(length)
    w2 = w * w
    for i in range(n):
        out[i * hop:i * hop + win] += frames[i]
        norm[i * hop:i * hop + win] += w2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def mel_filterbank(cfg=MelConfig()):
    """Triangular HTK-mel filters with unit peak, shape (n_mels, n_bins)."""
    st = cfg.stft
    freqs = np.arange(st.n_bins) * st.sample_rate / st.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


@functools.lru_cache(maxsize=8)
def _filterbank_pinv(cfg):
    p = np.linalg.pinv(mel_filterbank(cfg))
    p.setflags(write=False)
    return p


def power_spectrogram(x, cfg=StftConfig()):
    return np.abs(stft(x, cfg)) ** 2


def mel_spectrogram(x, cfg=MelConfig(), aligned=False):
    """Log-mel energies ``log(max(filterbank @ |STFT|^2, log_floor))``, shape (S, K).

    See the module docstring for the ``aligned`` framing.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if aligned:
        pad = (cfg.stft.win_length - cfg.stft.hop_length) // 2
        x = np.pad(x, (pad, pad))
    power = power_spectrogram(x, cfg.stft)
    mel = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


def mel_to_linear(mel, cfg=MelConfig(), method="pinv"):
    """Approximate linear magnitudes (S, n_bins) from a log-mel matrix.

    The log floor is subtracted after ``exp`` so that floor-clamped entries
    map to zero energy. ``method="pinv"`` uses the clamped pseudo-inverse of
    the filterbank; ``method="nnls"`` solves a non-negative least-squares
    problem per frame (slower).
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != cfg.n_mels:
        raise ValueError(f"mel has {mel.shape[-1]} channels, filterbank expects {cfg.n_mels}")
    energy = np.maximum(np.exp(mel) - cfg.log_floor, 0.0)
    if method == "pinv":
        power = energy @ _filterbank_pinv(cfg).T
    elif method == "nnls":
        from scipy.optimize import nnls

        fb = mel_filterbank(cfg)
        power = np.stack([nnls(fb, row)[0] for row in energy]) if len(energy) else energy
    else:
        raise ValueError(f"unknown method {method!r}")
    return np.sqrt(np.maximum(power, 0.0))


def spectral_convergence(x, mag, cfg=StftConfig()):
    ref = np.linalg.norm(mag)
    if ref == 0:
        return 0.0
    return float(np.linalg.norm(np.abs(stft(x, cfg)) - mag) / ref)


def griffin_lim(mag, cfg=StftConfig(), n_iters=60, seed=0, return_errors=False):
    """Classic Griffin-Lim phase retrieval.

    Starts from seeded uniform random phase and alternates ISTFT, STFT and
    magnitude replacement. The output has ``(frames - 1) * hop + win``
    samples. With ``return_errors=True`` also returns the spectral
    convergence measured after each iteration.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if n_iters < 0:
        raise ValueError("n_iters must be >= 0")
    if np.any(mag < 0):
        raise ValueError("magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    spec = mag * np.exp(2j * np.pi * rng.random(mag.shape))
    errors = []
    for _ in range(n_iters):
        rebuilt = stft(istft(spec, cfg), cfg)
        if return_errors:
            ref = np.linalg.norm(mag)
            errors.append(float(np.linalg.norm(np.abs(rebuilt) - mag) / ref) if ref else 0.0)
        spec = mag * np.exp(1j * np.angle(rebuilt))
    out = istft(spec, cfg)
    if return_errors:
        return out, errors
    return out


def vocode(mel, cfg=MelConfig(), n_iters=60, seed=0):
    """Log-mel to waveform via pseudo-inverse and Griffin-Lim."""
    return griffin_lim(mel_to_linear(mel, cfg), cfg.stft, n_iters=n_iters, seed=seed)


def read_wav(path):
    with _wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: only mono audio is supported")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wave):
    pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype("<i2")
    with _wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wave.sample_rate)
        f.writeframes(pcm.tobytes())
