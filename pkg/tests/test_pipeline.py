import json
import os

import numpy as np
import pytest

from depthmocap.formats import read_series_csv
from depthmocap.model import load_bundled
from depthmocap.pipeline import (PipelineConfig, compare_methods,
                                 moving_average, run_pipeline,
                                 run_pipeline_stream, write_comparison_csv,
                                 write_outputs)
from depthmocap.synth import NoiseConfig, ScenarioConfig, write_dataset


def _config(ds, outdir, **kw):
    return PipelineConfig(
        manifest=os.path.join(ds, "manifest.json"),
        init=os.path.join(ds, "init.json"),
        output_dir=str(outdir),
        forces=os.path.join(ds, "forces.csv"),
        emg=os.path.join(ds, "emg.csv"),
        mvc=[os.path.join(ds, "emg_mvc_0.csv"),
             os.path.join(ds, "emg_mvc_1.csv")],
        **kw)


@pytest.fixture(scope="module")
def clean_dataset(tmp_path_factory):
    ds = tmp_path_factory.mktemp("ds_clean")
    model = load_bundled("biomech10").with_root_locked()
    write_dataset(ds, model, ScenarioConfig(duration_s=2.0, seed=3))
    return str(ds)


@pytest.fixture(scope="module")
def noisy_dataset(tmp_path_factory):
    ds = tmp_path_factory.mktemp("ds_noisy")
    model = load_bundled("biomech10").with_root_locked()
    sc = ScenarioConfig(
        duration_s=1.5, seed=11,
        noise=NoiseConfig(pixel_sigma=0.5, depth_sigma=1.0,
                          blob_drop_prob=0.03, frame_drop_prob=0.05))
    write_dataset(ds, model, sc)
    return str(ds)


@pytest.fixture(scope="module")
def result(clean_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run_clean")
    return run_pipeline(_config(clean_dataset, out))


# -- moving average --------------------------------------------------------

def test_moving_average_matches_naive_window():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(50, 3))
    out = moving_average(v, 14)
    for i in range(50):
        lo, hi = max(i - 7, 0), min(i + 7, 50)
        assert np.allclose(out[i], v[lo:hi].mean(axis=0), atol=1e-12)


def test_moving_average_equals_delayed_trailing_window():
    rng = np.random.default_rng(1)
    v = rng.normal(size=80)
    out = moving_average(v, 14)
    # interior samples: centered window = trailing 14-sample window whose
    # newest sample is 7 samples in the future of the window center
    for i in range(7, 80 - 7):
        j = i + 6                       # trailing window [j-13, j]
        assert np.isclose(out[i], v[j - 13:j + 1].mean(), atol=1e-12)


def test_odd_moving_average_window_rejected(clean_dataset, tmp_path):
    with pytest.raises(ValueError):
        _config(clean_dataset, tmp_path, moving_average_window=13)
    with pytest.raises(ValueError):
        _config(clean_dataset, tmp_path, moving_average_window=0)


# -- closed-loop accuracy --------------------------------------------------

def _truth_series(ds, name):
    cols, t, vals = read_series_csv(os.path.join(ds, name))
    return cols, t, vals


def test_world_marker_accuracy_on_clean_trial(clean_dataset, result):
    cols, tt, tm = _truth_series(clean_dataset, "truth_markers.csv")
    truth = np.column_stack(
        [np.interp(result.times, tt, tm[:, c]) for c in range(tm.shape[1])])
    est = np.column_stack(
        [np.interp(result.times, result.times,
                   result.markers_world.reshape(result.times.size, -1)[:, k])
         for k in range(truth.shape[1])])
    # map columns: truth header order may differ from tracker order
    est_cols = [f"{n}_{ax}" for n in result.marker_names for ax in "xyz"]
    col_of = {c: k for k, c in enumerate(est_cols)}
    err2 = [(truth[:, c] - est[:, col_of[name]]) ** 2
            for c, name in enumerate(cols)]
    rmse = np.sqrt(np.mean(np.sum(np.array(err2).reshape(13, 3, -1),
                                  axis=1)))
    assert rmse < 0.005            # < 5 mm on the noiseless short trial


def test_joint_angles_recover_truth(clean_dataset, result):
    cols, tt, tq = _truth_series(clean_dataset, "truth_q.csv")
    assert cols == result.dof_names
    truth = np.column_stack(
        [np.interp(result.times, tt, tq[:, c]) for c in range(tq.shape[1])])
    mask = result.times > result.times[0] + 1.0    # skip the EKF transient
    d = result.q[mask] - truth[mask]
    d = (d + np.pi) % (2 * np.pi) - np.pi          # wrapped difference
    per_dof = np.degrees(np.sqrt(np.mean(d ** 2, axis=0)))
    assert per_dof.max() < 5.0


def test_output_grid_uniform_despite_dropped_frames(noisy_dataset, tmp_path):
    res = run_pipeline(_config(noisy_dataset, tmp_path / "o"))
    dt = np.diff(res.times)
    assert np.allclose(dt, 1.0 / 120.0, atol=1e-9)
    # the synthetic trial drops camera frames, so the tracked set is shorter
    # than the filled frame-number range
    fn = res.track_frame_numbers
    assert fn[-1] - fn[0] + 1 > fn.size


# -- latency reporting -----------------------------------------------------

def test_latency_report_structure(result):
    d = result.latency.to_dict()
    assert set(d["stages"]) == {"tracking", "inverse kinematics",
                                "inverse dynamics", "static optimization"}
    total = sum(v["mean_ms"] for v in d["stages"].values())
    assert np.isclose(d["total_mean_ms"], total, rtol=1e-9)
    assert np.isclose(d["filter_delay_ms"], 7 / 120 * 1000.0)
    assert np.isclose(d["motion_to_feedback_ms"],
                      d["total_mean_ms"] + d["filter_delay_ms"])


# -- determinism and streaming ---------------------------------------------

def _read_bytes(paths):
    return {k: open(p, "rb").read() for k, p in paths.items()
            if k != "latency"}


def test_two_runs_byte_identical(clean_dataset, tmp_path):
    p1 = write_outputs(run_pipeline(_config(clean_dataset, tmp_path / "a")),
                       tmp_path / "a")
    p2 = write_outputs(run_pipeline(_config(clean_dataset, tmp_path / "b")),
                       tmp_path / "b")
    assert _read_bytes(p1) == _read_bytes(p2)


def test_stream_matches_batch_byte_for_byte(noisy_dataset, tmp_path):
    batch = run_pipeline(_config(noisy_dataset, tmp_path / "batch"))
    pb = write_outputs(batch, tmp_path / "batch")
    _, ps = run_pipeline_stream(
        _config(noisy_dataset, tmp_path / "stream", stream=True))
    assert _read_bytes(pb) == _read_bytes(ps)


def test_written_csv_round_trips(result, tmp_path):
    paths = write_outputs(result, tmp_path)
    cols, t, q = read_series_csv(paths["q"])
    assert cols == result.dof_names
    assert np.array_equal(t, result.times)
    assert np.array_equal(q, result.q)
    lat = json.load(open(paths["latency"]))
    assert lat == result.latency.to_dict()


# -- method comparison -----------------------------------------------------

def test_identical_runs_agree_perfectly():
    run = {"q": np.sin(np.linspace(0, 5, 40)),
           "tau": np.cos(np.linspace(0, 5, 40))}
    rows = compare_methods(run, dict(run), dict(run))
    assert len(rows) == 4
    for r in rows:
        assert r["rmsd"] == 0.0
        assert r["bias"] == 0.0
        assert r["loaLower"] == 0.0 and r["loaUpper"] == 0.0


def test_three_frame_comparison_matches_hand_computation():
    # differences a - ref: -0.1, 0.0, 0.2
    a = {"q": np.array([1.0, 2.0, 3.0])}
    ref = {"q": np.array([1.1, 2.0, 2.8])}
    rows = compare_methods(a, a, ref)
    r = rows[0]
    d = np.array([-0.1, 0.0, 0.2])
    bias = d.mean()
    sd = d.std(ddof=1)
    assert np.isclose(r["bias"], bias, atol=1e-12)
    assert np.isclose(r["sd"], sd, atol=1e-12)
    assert np.isclose(r["loaLower"], bias - 1.96 * sd, atol=1e-12)
    assert np.isclose(r["loaUpper"], bias + 1.96 * sd, atol=1e-12)
    assert np.isclose(r["rmsd"], np.sqrt(np.mean(d ** 2)), atol=1e-12)


def test_comparison_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        compare_methods({"q": np.zeros(3)}, {"q": np.zeros(3)},
                        {"q": np.zeros(4)})


def test_comparison_csv_columns(tmp_path):
    rows = compare_methods({"q": np.arange(5.0)}, {"q": np.arange(5.0)},
                           {"q": np.arange(5.0) + 0.1})
    path = tmp_path / "cmp.csv"
    write_comparison_csv(path, rows)
    header = open(path).readline().strip().split(",")
    assert header == ["quantity", "pairing", "rmsd", "bias", "sd",
                      "loaLower", "loaUpper"]
