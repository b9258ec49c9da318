"""Rigid frame alignment between capture systems, dropped-frame gap filling
and time-series resampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray      # (3, 3)
    translation: np.ndarray   # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-10 or np.linalg.det(R) < 0:
            raise RegistrationError("rotation must be proper orthonormal")

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


@dataclass
class TimeSeries:
    times: np.ndarray         # strictly increasing, seconds
    values: np.ndarray        # (n, d)
    nominal_rate: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[0] != self.times.shape[0]:
            self.values = self.values.T
        if np.any(np.diff(self.times) <= 0):
            raise RegistrationError("times must be strictly increasing")


def fit_rigid(src, dst) -> RigidTransform:
    """Least-squares rigid transform (Kabsch, SVD) mapping src onto dst."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise RegistrationError("src/dst must be matching (n, 3) arrays")
    if src.shape[0] < 3:
        raise RegistrationError("need at least 3 point pairs")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, S, Vt = np.linalg.svd(H)
    if S[1] < 1e-12 * max(S[0], 1e-300):
        raise RegistrationError("degenerate (collinear) point configuration")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cd - R @ cs)


def fill_dropped_frames(values, frame_numbers, rate: float = 60.0,
                        max_gap: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct samples at every integer frame number by linear
    interpolation of the neighboring received samples.

    Returns (frame_numbers_filled, values_filled) on the uniform grid
    frame_numbers[0] .. frame_numbers[-1].
    """
    fn = np.asarray(frame_numbers)
    vals = np.atleast_2d(np.asarray(values, dtype=float))
    if vals.shape[0] != fn.shape[0]:
        vals = vals.T
    if np.any(np.diff(fn) <= 0):
        raise RegistrationError("frame numbers must be strictly increasing")
    gaps = np.diff(fn)
    if np.any(gaps > max_gap):
        i = int(np.argmax(gaps))
        raise RegistrationError(
            f"unrecoverable gap of {int(gaps[i])} frames after frame {int(fn[i])}")
    full = np.arange(fn[0], fn[-1] + 1)
    out = np.empty((full.shape[0], vals.shape[1]))
    for c in range(vals.shape[1]):
        out[:, c] = np.interp(full, fn, vals[:, c])
    return full, out


def resample_linear(series: TimeSeries, target_rate: float) -> TimeSeries:
    """Linear interpolation onto a uniform grid spanning the original range."""
    if target_rate <= 0:
        raise RegistrationError("target rate must be positive")
    t0, t1 = series.times[0], series.times[-1]
    n = int(np.floor((t1 - t0) * target_rate + 1e-9)) + 1
    t = t0 + np.arange(n) / target_rate
    # snap onto coinciding source samples so same-rate resampling is exact
    j = np.clip(np.searchsorted(series.times, t), 0, series.times.size - 1)
    for jj in (j, np.maximum(j - 1, 0)):
        near = np.abs(series.times[jj] - t) < 1e-12 * (1.0 + np.abs(t))
        t[near] = series.times[jj[near]]
    out = np.empty((n, series.values.shape[1]))
    for c in range(series.values.shape[1]):
        out[:, c] = np.interp(t, series.times, series.values[:, c])
    return TimeSeries(t, out, target_rate)
