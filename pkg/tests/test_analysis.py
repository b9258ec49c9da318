import numpy as np
import pytest

from depthmocap.analysis import (
    AnalysisError, bland_altman, latency_report, rmsd, segment_cycles,
)


def test_rmsd_identity_and_constant_offset():
    a = np.random.default_rng(0).normal(size=100)
    assert rmsd(a, a) == 0.0
    assert np.isclose(rmsd(a + 2.5, a), 2.5)


def test_rmsd_matches_direct_summation():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=50), rng.normal(size=50)
    total = 0.0
    for x, y in zip(a, b):       # independent hand-summed oracle
        total += (x - y) ** 2
    assert np.isclose(rmsd(a, b), np.sqrt(total / 50), atol=1e-12)


def test_rmsd_length_mismatch():
    with pytest.raises(AnalysisError):
        rmsd(np.zeros(3), np.zeros(4))


def test_bland_altman_identity():
    a = np.random.default_rng(2).normal(size=30)
    ba = bland_altman(a, a)
    assert ba.bias == 0.0 and ba.loa_lower == 0.0 and ba.loa_upper == 0.0


def test_bland_altman_two_sample_hand_case():
    # differences {-1, +1}: bias 0, sd (n-1 denominator) = sqrt(2)
    ba = bland_altman(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert np.isclose(ba.bias, 0.0)
    assert np.isclose(ba.sd, np.sqrt(2))
    assert np.isclose(ba.loa_upper, 1.96 * np.sqrt(2))
    assert np.isclose(ba.loa_lower, -1.96 * np.sqrt(2))


def test_bland_altman_axis_modes():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(40, 3))
    b = a + np.array([0.1, 0.3, -0.2])
    img = bland_altman(a, b, "ImagePlane")
    dep = bland_altman(a, b, "DepthAxis")
    allx = bland_altman(a, b, "AllAxes")
    # differences are a - b
    assert np.isclose(img.bias, -0.2)
    assert np.isclose(dep.bias, 0.2)
    assert np.isclose(allx.bias, -(0.1 + 0.3 - 0.2) / 3)
    # pair means taken along the depth axis
    assert np.allclose(dep.pairs[:, 0], (a[:, 2] + b[:, 2]) / 2)


def test_rmsd_bias_sd_identity():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=200), rng.normal(size=200)
    ba = bland_altman(a, b)
    n = a.size
    assert np.isclose(rmsd(a, b) ** 2,
                      ba.bias ** 2 + ba.sd ** 2 * (n - 1) / n, atol=1e-12)


def test_segment_cycles_pure_sine():
    fs = 12000.0   # dense so linear resampling error stays below tolerance
    t = np.arange(0, 5.0, 1 / fs)          # [0, 5): 4 complete cycles
    phase = 2 * np.pi * t
    sig = np.sin(phase)
    cycles, mean, sd = segment_cycles(sig, phase)
    assert cycles.shape[0] == 4
    one = np.sin(2 * np.pi * np.linspace(0, 1, 101))
    assert np.max(np.abs(mean - one)) < 1e-6


def test_segment_cycles_constant_phase_errors():
    with pytest.raises(AnalysisError):
        segment_cycles(np.ones(100), np.ones(100))


def test_segment_cycles_120s_at_60rpm():
    fs = 120.0
    t = np.arange(0, 120.0 * fs + 1) / fs  # inclusive endpoint, as generated
    phase = 2 * np.pi * t                  # 60 RPM = 1 Hz
    cycles, _, _ = segment_cycles(np.cos(phase), phase)
    assert cycles.shape[0] == 120


def test_segment_cycles_mean_of_periodic_equals_single_cycle():
    fs = 200.0
    t = np.arange(0, 8.0, 1 / fs)
    phase = 2 * np.pi * 0.5 * t
    sig = np.cos(phase) + 0.3 * np.sin(2 * phase)
    cycles, mean, _ = segment_cycles(sig, phase)
    assert np.max(np.abs(mean - cycles[0])) < 1e-6


def test_latency_report_constant_stages():
    stages = {name: [float(k)] * 10 for k, name in
              enumerate(["a", "b", "c", "d", "e"], start=1)}
    rep = latency_report(stages)
    assert np.isclose(rep.total_mean_ms, 15.0)
    assert rep.total_sd_ms == 0.0
    assert np.isclose(sum(rep.stage_mean_ms.values()), rep.total_mean_ms,
                      atol=1e-9)


def test_latency_filter_delay_7_frames_at_120hz():
    rep = latency_report({"s": [1.0, 1.0]}, filter_delay_frames=7, rate_hz=120)
    assert np.isclose(rep.filter_delay_ms, 7 / 120 * 1000)  # ~58.3 ms
    assert np.isclose(rep.motion_to_feedback_ms, rep.total_mean_ms + 58 + 1 / 3)
