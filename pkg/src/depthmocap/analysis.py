"""Agreement metrics (RMSD, Bland-Altman), cycle segmentation/averaging and
per-stage latency reporting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOA_MULTIPLIER = 1.96   # Bland-Altman limits of agreement


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class BlandAltman:
    bias: float
    loa_lower: float
    loa_upper: float
    sd: float
    pairs: np.ndarray          # (n, 2): (mean, difference)


@dataclass
class LatencyReport:
    stage_mean_ms: dict        # stage name -> mean per frame
    stage_sd_ms: dict
    total_mean_ms: float
    total_sd_ms: float
    filter_delay_ms: float = 0.0

    @property
    def motion_to_feedback_ms(self) -> float:
        return self.total_mean_ms + self.filter_delay_ms

    def to_dict(self) -> dict:
        return {"stages": {k: {"mean_ms": self.stage_mean_ms[k],
                               "sd_ms": self.stage_sd_ms[k]}
                           for k in self.stage_mean_ms},
                "total_mean_ms": self.total_mean_ms,
                "total_sd_ms": self.total_sd_ms,
                "filter_delay_ms": self.filter_delay_ms,
                "motion_to_feedback_ms": self.motion_to_feedback_ms}


def rmsd(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise AnalysisError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def bland_altman(a, b, axis_mode: str = "AllAxes") -> BlandAltman:
    """Agreement between paired series.

    For (n, 3) positional input, axis_mode selects the difference axis:
    'ImagePlane' = mean of x/y differences, 'DepthAxis' = z difference,
    'AllAxes' = mean over all three. Pair means are taken along z for
    positional input (distance-to-camera on the abscissa), plain means for 1-D.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise AnalysisError("paired series must have equal shapes")
    if a.ndim == 2 and a.shape[1] == 3:
        d = a - b
        if axis_mode == "ImagePlane":
            diff = d[:, :2].mean(axis=1)
        elif axis_mode == "DepthAxis":
            diff = d[:, 2]
        elif axis_mode == "AllAxes":
            diff = d.mean(axis=1)
        else:
            raise AnalysisError(f"unknown axis mode '{axis_mode}'")
        mean = (a[:, 2] + b[:, 2]) / 2.0
    else:
        a = a.ravel()
        b = b.ravel()
        diff = a - b
        mean = (a + b) / 2.0
    if diff.shape[0] < 2:
        raise AnalysisError("need at least 2 pairs")
    bias = float(np.mean(diff))
    sd = float(np.std(diff, ddof=1))
    return BlandAltman(bias, bias - LOA_MULTIPLIER * sd,
                       bias + LOA_MULTIPLIER * sd, sd,
                       np.column_stack([mean, diff]))


def segment_cycles(signal, phase, n_points: int = 101):
    """Split a signal into cycles at positive-going zero crossings of a phase
    channel (e.g. wrapped crank angle), resample each to n_points over 0-100%
    and return (cycles (k, n_points[, d]), mean, sd)."""
    signal = np.asarray(signal, dtype=float)
    phase = np.asarray(phase, dtype=float)
    if signal.shape[0] != phase.shape[0]:
        raise AnalysisError("signal and phase must share length")
    s = np.sin(phase)
    c = np.cos(phase)
    s[np.abs(s) < 1e-9] = 0.0   # samples landing exactly on a cycle boundary
    # positive-going crossing of phase through 0 (mod 2*pi)
    cross = np.nonzero((s[:-1] < 0) & (s[1:] >= 0) & (c[1:] > 0))[0] + 1
    # a trace starting exactly at a cycle start counts as a boundary
    if abs(s[0]) < 1e-9 and c[0] > 0:
        cross = np.concatenate([[0], cross])
    if cross.size < 2:
        raise AnalysisError("fewer than 2 cycle boundaries detected")
    vals = np.atleast_2d(signal.T).T
    grid = np.linspace(0.0, 1.0, n_points)
    cycles = []
    for i0, i1 in zip(cross[:-1], cross[1:]):
        x = np.linspace(0.0, 1.0, i1 - i0 + 1)
        seg = vals[i0:i1 + 1]
        cycles.append(np.column_stack(
            [np.interp(grid, x, seg[:, d]) for d in range(seg.shape[1])]))
    cycles = np.array(cycles)
    if signal.ndim == 1:
        cycles = cycles[:, :, 0]
    return cycles, cycles.mean(axis=0), cycles.std(axis=0, ddof=0)


def latency_report(stage_times_ms: dict, filter_delay_frames: float = 0.0,
                   rate_hz: float = 120.0) -> LatencyReport:
    """stage_times_ms: stage name -> per-frame wall-clock samples (ms)."""
    means = {k: float(np.mean(v)) for k, v in stage_times_ms.items()}
    sds = {k: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
           for k, v in stage_times_ms.items()}
    totals = np.sum([np.asarray(v, dtype=float)
                     for v in stage_times_ms.values()], axis=0)
    return LatencyReport(
        stage_mean_ms=means,
        stage_sd_ms=sds,
        total_mean_ms=float(np.mean(totals)),
        total_sd_ms=float(np.std(totals, ddof=1)) if totals.size > 1 else 0.0,
        filter_delay_ms=filter_delay_frames / rate_hz * 1000.0,
    )
