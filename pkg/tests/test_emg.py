import numpy as np
import pytest

from depthmocap.emg import EmgError, envelope, mvc_scale, process_emg

FS = 2160.0


def test_zero_signal_zero_trace():
    raw = np.zeros(int(FS * 2))
    mvc = [np.sin(2 * np.pi * 100 * np.arange(int(FS * 3)) / FS)]
    out = process_emg(raw, FS, mvc)
    assert np.allclose(out, 0.0)


def test_rectified_sine_envelope_mean():
    # mean of |A sin| = 2A/pi; the 5 Hz low-pass keeps just that DC level
    A = 0.7
    t = np.arange(int(FS * 4)) / FS
    raw = A * np.sin(2 * np.pi * 100 * t)
    env = envelope(raw, FS)
    mid = env[int(FS):int(3 * FS)]   # skip filter edges
    assert np.allclose(np.mean(mid), 2 * A / np.pi, rtol=0.05)


def test_self_normalization_peak_near_one():
    rng = np.random.default_rng(0)
    t = np.arange(int(FS * 4)) / FS
    raw = rng.normal(size=t.size) * (1.0 + 0.5 * np.sin(2 * np.pi * 0.5 * t))
    out = process_emg(raw, FS, [raw])
    assert 0.9 < np.max(out) <= 1.0


def test_mvc_zero_raises():
    with pytest.raises(EmgError):
        mvc_scale([np.zeros(int(FS * 2))], FS)


def test_low_sample_rate_rejected():
    with pytest.raises(EmgError):
        envelope(np.zeros(1000), 500.0)


def test_multichannel_shapes():
    rng = np.random.default_rng(1)
    raw = rng.normal(size=(int(FS * 2), 3))
    out = process_emg(raw, FS, [raw])
    assert out.shape == raw.shape
    assert np.all(out >= 0) and np.all(out <= 1)


def test_causal_mode_lags_zero_phase():
    t = np.arange(int(FS * 4)) / FS
    burst = np.exp(-((t - 2.0) ** 2) / 0.01)
    raw = burst * np.sin(2 * np.pi * 80 * t)
    zp = envelope(raw, FS, zero_phase=True)
    causal = envelope(raw, FS, zero_phase=False)
    assert np.argmax(causal) > np.argmax(zp)
