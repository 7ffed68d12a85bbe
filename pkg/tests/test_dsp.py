import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lip2speech import dsp

from oracles import naive_dft_magnitude

SR = 16000
CFG = dsp.StftConfig()
MEL = dsp.MelConfig()


def sine(freq, seconds=1.0, amp=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def test_config_derived_sizes():
    assert (CFG.win_length, CFG.hop_length, CFG.n_fft, CFG.n_bins) == (640, 160, 1024, 513)
    with pytest.raises(ValueError):
        dsp.StftConfig(window_ms=10, hop_ms=20)


def test_waveform_rejects_non_finite():
    with pytest.raises(ValueError):
        dsp.Waveform(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        dsp.Waveform(np.zeros(4), sample_rate=0)


def test_zero_second_gives_97_zero_frames():
    spec = dsp.stft(np.zeros(SR), CFG)
    assert spec.shape == (97, 513)
    assert np.all(np.abs(spec) == 0)
    assert dsp.n_frames(16000, CFG) == 97


def test_too_short_raises():
    with pytest.raises(ValueError, match="input too short"):
        dsp.stft(np.zeros(639), CFG)


def test_sine_peak_matches_dft_oracle():
    x = sine(1000.0)
    mag = np.abs(dsp.stft(x, CFG))
    expected_bin = int(round(1000.0 * CFG.n_fft / SR))
    assert np.all(mag.argmax(1) == expected_bin)
    frame = x[:640] * dsp.analysis_window(640)
    np.testing.assert_allclose(mag[0], naive_dft_magnitude(frame, CFG.n_fft), atol=1e-9)


def test_window_is_periodic_hann():
    w = dsp.analysis_window(640)
    n = np.arange(640)
    np.testing.assert_allclose(w, 0.5 - 0.5 * np.cos(2 * np.pi * n / 640), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.integers(640, 3000), elements=st.floats(-1, 1)))
def test_istft_round_trip_interior(x):
    y = dsp.istft(dsp.stft(x, CFG), CFG)
    lo, hi = CFG.win_length, len(y) - CFG.win_length
    if hi > lo:
        rms = np.sqrt(np.mean((y[lo:hi] - x[lo:hi]) ** 2))
        assert rms < 1e-6


def test_mel_shape_and_floor():
    m = dsp.mel_spectrogram(np.zeros(SR), MEL)
    assert m.shape == (97, 80)
    assert np.all(m == np.log(1e-5))
    assert np.all(dsp.mel_spectrogram(sine(300), MEL) >= np.log(MEL.log_floor))


def test_mel_energy_scaling_is_log4(rng):
    x = rng.normal(size=SR) * 0.1
    a, b = dsp.mel_spectrogram(x, MEL), dsp.mel_spectrogram(2 * x, MEL)
    above = a > np.log(MEL.log_floor)
    np.testing.assert_allclose((b - a)[above], np.log(4.0), atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mel_shift_covariance(seed):
    x = np.random.default_rng(seed).normal(size=4000)
    a = dsp.mel_spectrogram(x[160:], MEL)
    b = dsp.mel_spectrogram(x, MEL)[1:]
    n = min(len(a), len(b))
    np.testing.assert_allclose(a[:n], b[:n], atol=1e-6)


def test_aligned_framing_gives_four_frames_per_video_frame():
    # 0.8 s = 20 video frames at 25 fps -> 80 mel frames
    assert dsp.mel_spectrogram(np.zeros(12800), MEL, aligned=True).shape == (80, 80)


def test_filterbank_covers_every_bin():
    fb = dsp.mel_filterbank(MEL)
    assert fb.shape == (80, 513)
    assert np.all(fb.sum(1) > 0)
    freqs = np.arange(513) * SR / 1024
    covered = (freqs > 0) & (freqs < 8000)
    assert np.all(fb[:, covered].sum(0) > 0)
    assert fb.max() == pytest.approx(1.0, abs=0.05)


def test_mel_to_linear_floor_and_non_negative(rng):
    floor = np.full((10, 80), np.log(1e-5))
    assert np.max(dsp.mel_to_linear(floor, MEL)) <= 1e-4
    noisy = rng.normal(size=(30, 80)) * 3
    assert np.all(dsp.mel_to_linear(noisy, MEL) >= 0)
    assert np.all(dsp.mel_to_linear(noisy[:3], MEL, method="nnls") >= 0)


def test_mel_to_linear_channel_mismatch():
    with pytest.raises(ValueError):
        dsp.mel_to_linear(np.zeros((4, 40)), MEL)


@pytest.mark.parametrize("freq", [440.0, 1000.0, 2500.0])
@pytest.mark.parametrize("method", ["pinv", "nnls"])
def test_mel_to_linear_sine_peak(freq, method):
    lin = dsp.mel_to_linear(dsp.mel_spectrogram(sine(freq, 0.2), MEL), MEL, method=method)
    expected = freq * CFG.n_fft / SR
    assert np.all(np.abs(lin.argmax(1) - expected) <= 2)


def test_griffin_lim_zero_and_determinism():
    assert np.all(dsp.griffin_lim(np.zeros((20, 513)), CFG, n_iters=5) == 0)
    mag = np.abs(dsp.stft(sine(440, 0.3), CFG))
    a = dsp.griffin_lim(mag, CFG, n_iters=10, seed=4)
    b = dsp.griffin_lim(mag, CFG, n_iters=10, seed=4)
    c = dsp.griffin_lim(mag, CFG, n_iters=10, seed=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert len(a) == (len(mag) - 1) * CFG.hop_length + CFG.win_length


def test_griffin_lim_error_non_increasing(rng):
    x = rng.normal(size=8000) * 0.1
    _, errs = dsp.griffin_lim(np.abs(dsp.stft(x, CFG)), CFG, n_iters=40, seed=0, return_errors=True)
    assert np.all(np.diff(errs) <= 1e-6)
    with pytest.raises(ValueError):
        dsp.griffin_lim(-np.ones((3, 513)), CFG)


def test_wav_round_trip(tmp_path, rng):
    x = np.clip(rng.normal(size=1000) * 0.2, -0.99, 0.99)
    path = tmp_path / "x.wav"
    dsp.write_wav(path, dsp.Waveform(x, SR))
    back = dsp.read_wav(path)
    assert back.sample_rate == SR
    assert np.max(np.abs(back.samples - x)) <= 1 / 32768 + 1e-12
