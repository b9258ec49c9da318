"""Surface EMG envelope extraction and MVC normalization.

Chain: 4th-order Butterworth band-pass 10-425 Hz, rectification, 4th-order
Butterworth low-pass 5 Hz. Offline processing is zero-phase
(forward-backward); the causal mode uses the same filters one-way and carries
the associated phase lag.
"""
from __future__ import annotations

import numpy as np
from scipy import signal

BAND_HZ = (10.0, 425.0)
ENVELOPE_HZ = 5.0
FILTER_ORDER = 4
MVC_WINDOW_S = 1.0


class EmgError(ValueError):
    pass


def _sos(fs: float):
    if fs < 2 * BAND_HZ[1]:
        raise EmgError(f"sample rate {fs} Hz below Nyquist for "
                       f"{BAND_HZ[1]} Hz band edge")
    band = signal.butter(FILTER_ORDER, BAND_HZ, btype="bandpass", fs=fs,
                         output="sos")
    low = signal.butter(FILTER_ORDER, ENVELOPE_HZ, btype="lowpass", fs=fs,
                        output="sos")
    return band, low


def envelope(raw, fs: float, zero_phase: bool = True) -> np.ndarray:
    """Band-pass, rectify, low-pass. Input (n,) or (n, channels)."""
    raw = np.atleast_2d(np.asarray(raw, dtype=float).T).T
    band, low = _sos(fs)
    filt = signal.sosfiltfilt if zero_phase else signal.sosfilt
    out = filt(band, raw, axis=0)
    out = np.abs(out)
    out = filt(low, out, axis=0)
    return out if out.shape[1] > 1 else out[:, 0]


def mvc_scale(mvc_trials, fs: float) -> np.ndarray:
    """Per-channel normalization scalar: the best contiguous 1 s window mean
    of the processed maximal-effort trials."""
    best = None
    win = int(round(MVC_WINDOW_S * fs))
    for trial in mvc_trials:
        env = np.atleast_2d(envelope(trial, fs, zero_phase=True).T).T
        if env.shape[0] < win:
            raise EmgError("MVC trial shorter than the 1 s averaging window")
        kernel = np.ones(win) / win
        means = np.apply_along_axis(
            lambda x: np.convolve(x, kernel, mode="valid"), 0, env)
        peak = means.max(axis=0)
        best = peak if best is None else np.maximum(best, peak)
    if best is None or np.any(best <= 0):
        raise EmgError("MVC normalization scalar is zero")
    return best


def process_emg(raw, fs: float, mvc_trials, zero_phase: bool = True) -> np.ndarray:
    """Normalized activation trace in [0, 1]; columns are channels."""
    env = envelope(raw, fs, zero_phase=zero_phase)
    scale = mvc_scale(mvc_trials, fs)
    if env.ndim == 1:
        scale = float(np.asarray(scale).ravel()[0])
    return np.clip(env / scale, 0.0, 1.0)
