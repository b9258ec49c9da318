"""End-to-end trial processing: marker tracking, temporal conditioning,
inverse kinematics/dynamics, and EMG-informed static optimization.

Per trial: track every frame, register the camera to the model frame with a
rigid fit on the thorax markers, fill dropped frames, resample to 120 Hz,
smooth with a 14-sample moving average (7-sample group delay), run the
3-derivative EKF IK on the biomechanical model, inverse dynamics with the
resampled pedal force, and per-frame static optimization against the
processed EMG. Every stage is wall-clock timed for the latency report.
"""
from __future__ import annotations

import csv
import gc
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .analysis import LatencyReport, bland_altman, latency_report, rmsd
from .dynamics import ExternalForce, external_torques, rnea
from .ekf import EkfConfig, ekf_init, ekf_step, solve_ik
from .emg import process_emg
from .model import KinematicModel, load_bundled, load_model
from .registration import (RegistrationError, RigidTransform, TimeSeries,
                           fill_dropped_frames, fit_rigid, resample_linear)
from .so import SoResult, SoWeights, static_optimization
from .tracking import (MarkerTracker, TrackerConfig, Visibility,
                       area_config_from_dict)

OUTPUT_RATE_HZ = 120.0
THORAX_MARKERS = ("STER", "XIPH", "C7", "T10")


class _gc_paused:
    """Suspend the cyclic garbage collector around the per-frame loops so
    collector pauses do not land inside the latency measurements."""

    def __enter__(self):
        self._was_enabled = gc.isenabled()
        gc.disable()

    def __exit__(self, *exc):
        if self._was_enabled:
            gc.enable()
        return False


@dataclass
class PipelineConfig:
    manifest: str
    init: str
    output_dir: str
    forces: str | None = None
    emg: str | None = None
    mvc: list[str] = field(default_factory=list)
    biomech_model: str = "biomech10"      # bundled name or JSON path
    moving_average_window: int = 14
    endpoint_marker: str = "WRIST"
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    biomech_ekf: EkfConfig = field(default_factory=lambda: EkfConfig(
        n_derivatives=3, process_noise_qddot=2000.0, measurement_noise=0.004))
    so_weights: SoWeights = field(default_factory=SoWeights)
    stream: bool = False

    def __post_init__(self):
        if self.moving_average_window < 2 or self.moving_average_window % 2:
            raise ValueError("moving average window must be even and >= 2")


@dataclass
class PipelineResult:
    marker_names: list[str]
    track_times: np.ndarray            # camera timestamps, 60 Hz
    track_frame_numbers: np.ndarray
    track_markers: np.ndarray          # (n, m, 3) camera frame
    track_pixels: np.ndarray           # (n, m, 2)
    track_vis: list[list[str]]
    times: np.ndarray                  # 120 Hz output grid
    markers_world: np.ndarray          # (n120, m, 3) registered + smoothed
    q: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray
    tau: np.ndarray
    activations: np.ndarray
    muscle_forces: np.ndarray
    muscle_names: list[str]
    dof_names: list[str]
    camera_to_world: RigidTransform
    latency: LatencyReport
    so_kkt: np.ndarray = None          # per-sample solver KKT residuals


def _load_biomech(name_or_path: str) -> KinematicModel:
    if os.path.exists(name_or_path):
        return load_model(name_or_path)
    return load_bundled(name_or_path)


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Centered variant of the trailing window: sample i averages
    [i - window/2, i + window/2 - 1], truncated at the edges. Identical to a
    trailing window emitted with a window/2-sample delay."""
    n = values.shape[0]
    half = window // 2
    flat = values.reshape(n, -1)
    csum = np.vstack([np.zeros((1, flat.shape[1])), np.cumsum(flat, axis=0)])
    out = np.empty_like(flat)
    for i in range(n):
        lo = max(i - half, 0)
        hi = min(i + half, n)
        out[i] = (csum[hi] - csum[lo]) / (hi - lo)
    return out.reshape(values.shape)


def track_sequence(config: PipelineConfig):
    """Run the marker tracker over the whole manifest.

    Returns (tracker, times, markers3d, pixels, visibilities, per-frame
    seconds, frame numbers)."""
    intr, fps, records = formats.read_manifest(config.manifest)
    area_dicts, labels = formats.read_init_file(config.init)
    areas = [area_config_from_dict(d) for d in area_dicts]
    base = os.path.dirname(os.path.abspath(config.manifest))
    first = formats.load_frame(base, records[0])
    tracker = MarkerTracker(areas, intr, labels, first,
                            config=config.tracker)
    names = tracker.marker_names
    times, markers, pixels, vis, stage_s, frame_numbers = \
        [first.timestamp], [], [], [], [], [records[0]["frameNumber"]]
    init3d = np.full((len(names), 3), np.nan)
    _, model_markers = tracker.model.forward_kinematics(tracker.ekf.q)
    for i, n in enumerate(names):
        init3d[i] = model_markers[tracker.model.marker_index(n)]
    markers.append(init3d)
    pixels.append(np.array([tracker.pixels[n] for n in names]))
    vis.append([Visibility.VISIBLE.value] * len(names))
    stage_s.append(0.0)
    with _gc_paused():
        for rec in records[1:]:
            frame = formats.load_frame(base, rec)
            t0 = time.perf_counter()
            out = tracker.step(frame)
            stage_s.append(time.perf_counter() - t0)
            times.append(frame.timestamp)
            frame_numbers.append(frame.frame_number)
            markers.append(np.stack([m.cam3d for m in out]))
            pixels.append(np.array([m.pixel for m in out]))
            vis.append([m.visibility.value for m in out])
    return (tracker, np.array(times), np.stack(markers), np.stack(pixels),
            vis, np.array(stage_s), np.array(frame_numbers), fps)


def register_camera(marker_names, cam_markers, model: KinematicModel) \
        -> RigidTransform:
    """Rigid camera->model-frame transform fit on the thorax markers of the
    initialization frame (the thorax is the locked model root)."""
    rest = model.rest_markers()
    src = np.stack([cam_markers[marker_names.index(n)]
                    for n in THORAX_MARKERS])
    dst = np.stack([rest[model.marker_index(n)] for n in THORAX_MARKERS])
    return fit_rigid(src, dst)


def _interp_to(times, t, vals):
    vals = np.atleast_2d(np.asarray(vals, dtype=float))
    if vals.shape[0] != t.shape[0]:
        vals = vals.T
    return np.column_stack([np.interp(times, t, vals[:, c])
                            for c in range(vals.shape[1])])


def _resample_forces(path, times):
    cols, t, vals = formats.read_series_csv(path)
    out = _interp_to(times, t, vals)
    return out[:, :3], out[:, 3:6]


def _resample_emg(path, mvc_paths, times):
    cols, t, vals = formats.read_series_csv(path)
    trials = [formats.read_series_csv(p)[2] for p in mvc_paths]
    fs = 1.0 / np.median(np.diff(t))
    act = process_emg(vals, fs, trials)
    return np.clip(_interp_to(times, t, act), 0.0, 1.0)


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    model = _load_biomech(config.biomech_model).with_root_locked()

    (tracker, t60, m60, px60, vis, track_s, frame_numbers, fps) = \
        track_sequence(config)

    # temporal conditioning: gap fill at the camera rate, resample to the
    # output rate, then the smoothing window
    flat = m60.reshape(m60.shape[0], -1)
    full_fn, filled = fill_dropped_frames(flat, frame_numbers, rate=fps)
    t_full = t60[0] + (full_fn - full_fn[0]) / fps
    series = resample_linear(TimeSeries(t_full, filled, fps), OUTPUT_RATE_HZ)
    smoothed = moving_average(series.values, config.moving_average_window)
    times = series.times

    cam2world = register_camera(tracker.marker_names, m60[0], model)
    markers_world = cam2world.apply(
        smoothed.reshape(times.size, -1, 3).reshape(-1, 3)).reshape(
        times.size, -1, 3)

    # tracked marker order -> biomech model marker order
    order = [tracker.marker_names.index(n) for n in model.marker_names]
    meas_all = markers_world[:, order]

    n = times.size
    ndof = model.ndof
    q = np.zeros((n, ndof))
    qdot = np.zeros((n, ndof))
    qddot = np.zeros((n, ndof))
    st = ekf_init(model, meas_all[0], config.biomech_ekf)
    dt = 1.0 / OUTPUT_RATE_HZ
    ik_s = np.zeros(n)
    q[0] = st.q
    with _gc_paused():
        for k in range(1, n):
            t0 = time.perf_counter()
            st = ekf_step(st, model, meas_all[k], dt, config.biomech_ekf)
            ik_s[k] = time.perf_counter() - t0
            q[k], qdot[k], qddot[k] = st.q, st.qdot, st.qddot

    # external pedal force: world-frame reaction applied at the recorded
    # contact point on the segment carrying the endpoint marker
    if config.forces:
        forces, points = _resample_forces(config.forces, times)
    else:
        forces = np.zeros((n, 3))
        points = np.zeros((n, 3))
    seg_of = {mn: s.name for s in model.segments for mn, _ in s.markers}
    hand_segment = seg_of[config.endpoint_marker]

    if config.emg:
        emg120 = _resample_emg(config.emg, config.mvc, times)
    else:
        emg120 = np.zeros((n, 8))

    tau = np.zeros((n, ndof))
    acts = np.zeros((n, len(model.muscles)))
    mforces = np.zeros((n, len(model.muscles)))
    id_s = np.zeros(n)
    so_s = np.zeros(n)
    so_kkt = np.zeros(n)
    warm = None
    hand_si = [s.name for s in model.segments].index(hand_segment)
    with _gc_paused():
        for k in range(n):
            t0 = time.perf_counter()
            frames_k = model._dof_frames(q[k])
            ext = []
            if np.any(forces[k]):
                T = frames_k[0][hand_si]
                local = T[:3, :3].T @ (points[k] - T[:3, 3])
                ext.append(ExternalForce(hand_segment, local, -forces[k]))
            tau[k] = rnea(model, q[k], qdot[k], qddot[k], frames=frames_k)
            if ext:
                tau[k] += external_torques(model, q[k], ext, frames_k)
            id_s[k] = time.perf_counter() - t0
            t0 = time.perf_counter()
            res = static_optimization(model, q[k], qdot[k], tau[k], emg120[k],
                                      config.so_weights, warm_start=warm)
            acts[k] = res.activations
            mforces[k] = (res.muscle_gain * res.activations
                          + res.muscle_passive)
            so_kkt[k] = res.kkt_residual
            so_s[k] = time.perf_counter() - t0
            warm = np.concatenate([res.activations, res.residual_torques])

    # biomech stages run on the 120 Hz grid; sum them into per-camera-frame
    # buckets so every stage reports one sample per camera frame
    n_cam = track_s.size - 1

    def per_camera_frame(samples):
        return np.array([chunk.sum()
                         for chunk in np.array_split(samples, n_cam)])

    stage_ms = {
        "tracking": 1e3 * track_s[1:],
        "inverse kinematics": 1e3 * per_camera_frame(ik_s),
        "inverse dynamics": 1e3 * per_camera_frame(id_s),
        "static optimization": 1e3 * per_camera_frame(so_s),
    }
    latency = latency_report(stage_ms,
                             filter_delay_frames=config
                             .moving_average_window // 2,
                             rate_hz=OUTPUT_RATE_HZ)

    return PipelineResult(
        marker_names=tracker.marker_names, track_times=t60,
        track_frame_numbers=frame_numbers,
        track_markers=m60, track_pixels=px60, track_vis=vis, times=times,
        markers_world=markers_world, q=q, qdot=qdot, qddot=qddot, tau=tau,
        activations=acts, muscle_forces=mforces,
        muscle_names=[mus.name for mus in model.muscles],
        dof_names=list(model.dof_names), camera_to_world=cam2world,
        latency=latency, so_kkt=so_kkt)


def write_outputs(result: PipelineResult, outdir: str) -> dict:
    os.makedirs(outdir, exist_ok=True)
    paths = {k: os.path.join(outdir, v) for k, v in {
        "markers": "markers.csv", "q": "q.csv", "tau": "tau.csv",
        "activations": "activations.csv",
        "muscle_forces": "muscle_forces.csv",
        "markers_world": "markers_world.csv",
        "latency": "latency.json"}.items()}

    rows = []
    for i in range(result.track_times.size):
        rows.append({
            "frameNumber": int(result.track_frame_numbers[i]),
            "timestamp": result.track_times[i],
            "markers": {
                n: (result.track_pixels[i, j, 0],
                    result.track_pixels[i, j, 1],
                    result.track_markers[i, j], result.track_vis[i][j])
                for j, n in enumerate(result.marker_names)}})
    formats.write_tracked_csv(paths["markers"], result.marker_names, rows)

    formats.write_series_csv(paths["q"], result.dof_names, result.times,
                             result.q)
    formats.write_series_csv(paths["tau"], result.dof_names, result.times,
                             result.tau)
    formats.write_series_csv(paths["activations"], result.muscle_names,
                             result.times, result.activations)
    formats.write_series_csv(paths["muscle_forces"], result.muscle_names,
                             result.times, result.muscle_forces)
    mcols = [f"{n}_{ax}" for n in result.marker_names for ax in "xyz"]
    formats.write_series_csv(paths["markers_world"], mcols, result.times,
                             result.markers_world.reshape(
                                 result.times.size, -1))
    with open(paths["latency"], "w") as f:
        json.dump(result.latency.to_dict(), f, indent=2)
        f.write("\n")
    return paths


# -- streaming mode ---------------------------------------------------------

class _SeriesWriter:
    """Row-at-a-time writer producing the write_series_csv format."""

    def __init__(self, path, header):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(["time"] + list(header))

    def write(self, t, row):
        self._w.writerow([repr(float(t))] + [repr(float(x)) for x in row])

    def close(self):
        self._fh.close()


class _TrackedWriter:
    """Row-at-a-time writer producing the write_tracked_csv format."""

    def __init__(self, path, marker_names):
        self.names = marker_names
        header = ["frameNumber", "timestamp"]
        for m in marker_names:
            header += [f"{m}_u", f"{m}_v", f"{m}_X", f"{m}_Y", f"{m}_Z",
                       f"{m}_vis"]
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(header)

    def write(self, frame_number, timestamp, pixels, cam3d, vis):
        out = [int(frame_number), repr(float(timestamp))]
        for j in range(len(self.names)):
            out += [repr(float(pixels[j, 0])), repr(float(pixels[j, 1])),
                    repr(float(cam3d[j, 0])), repr(float(cam3d[j, 1])),
                    repr(float(cam3d[j, 2])), vis[j]]
        self._w.writerow(out)

    def close(self):
        self._fh.close()


def run_pipeline_stream(config: PipelineConfig) -> tuple[PipelineResult, dict]:
    """Streamed variant of run_pipeline + write_outputs: every CSV row is
    appended as soon as its value can no longer change.

    A tracked-marker row is written per camera frame; a biomech row is
    written once its smoothing window is complete (the configured
    window/2-sample delay); the truncated trailing windows flush at end of
    stream. The incremental computation is arranged to be float-identical to
    the batch path (prefix-stable interpolation grids, sequential cumulative
    sums), so both modes produce byte-identical files.
    """
    model = _load_biomech(config.biomech_model).with_root_locked()
    intr, fps, records = formats.read_manifest(config.manifest)
    area_dicts, labels = formats.read_init_file(config.init)
    areas = [area_config_from_dict(d) for d in area_dicts]
    base = os.path.dirname(os.path.abspath(config.manifest))
    first = formats.load_frame(base, records[0])
    tracker = MarkerTracker(areas, intr, labels, first, config=config.tracker)
    names = tracker.marker_names
    n_markers = len(names)

    outdir = config.output_dir
    os.makedirs(outdir, exist_ok=True)
    paths = {k: os.path.join(outdir, v) for k, v in {
        "markers": "markers.csv", "q": "q.csv", "tau": "tau.csv",
        "activations": "activations.csv",
        "muscle_forces": "muscle_forces.csv",
        "markers_world": "markers_world.csv",
        "latency": "latency.json"}.items()}
    w_markers = _TrackedWriter(paths["markers"], names)
    w_q = _SeriesWriter(paths["q"], model.dof_names)
    w_tau = _SeriesWriter(paths["tau"], model.dof_names)
    muscle_names = [m.name for m in model.muscles]
    w_act = _SeriesWriter(paths["activations"], muscle_names)
    w_mf = _SeriesWriter(paths["muscle_forces"], muscle_names)
    mcols = [f"{n}_{ax}" for n in names for ax in "xyz"]
    w_mw = _SeriesWriter(paths["markers_world"], mcols)

    order = [names.index(n) for n in model.marker_names]
    half = config.moving_average_window // 2
    dt = 1.0 / OUTPUT_RATE_HZ

    # external signal files are fully on disk; per-sample interpolation below
    # matches the batch whole-array interpolation element for element
    if config.forces:
        _, f_t, f_vals = formats.read_series_csv(config.forces)
    if config.emg:
        _, e_t, e_raw = formats.read_series_csv(config.emg)
        trials = [formats.read_series_csv(p)[2] for p in config.mvc]
        e_fs = 1.0 / np.median(np.diff(e_t))
        e_act = process_emg(e_raw, e_fs, trials)

    seg_of = {mn: s.name for s in model.segments for mn, _ in s.markers}
    hand_segment = seg_of[config.endpoint_marker]
    hand_si = [s.name for s in model.segments].index(hand_segment)

    # initialization-frame outputs (model-fit marker positions, as in batch)
    init3d = np.empty((n_markers, 3))
    _, model_markers = tracker.model.forward_kinematics(tracker.ekf.q)
    for i, n in enumerate(names):
        init3d[i] = model_markers[tracker.model.marker_index(n)]
    init_px = np.array([tracker.pixels[n] for n in names])
    cam2world = register_camera(names, init3d, model)
    w_markers.write(records[0]["frameNumber"], first.timestamp, init_px,
                    init3d, [Visibility.VISIBLE.value] * n_markers)

    t60 = [first.timestamp]
    frame_numbers = [records[0]["frameNumber"]]
    m60 = [init3d]
    px60 = [init_px]
    vis_all = [[Visibility.VISIBLE.value] * n_markers]
    track_s = [0.0]

    fn0 = records[0]["frameNumber"]
    t0_cam = first.timestamp
    # 60 Hz gap-filled flat marker rows and their uniform frame-number grid
    filled = [init3d.reshape(-1)]
    # 120 Hz resampled rows and their sequential cumulative sum
    res_rows = []
    csum = [np.zeros(3 * n_markers)]
    grid_times = []
    max_gap = 30

    # per-sample biomech state and accumulators
    emitted = 0
    ekf_state = None
    warm = None
    q_rows, qd_rows, qdd_rows, tau_rows = [], [], [], []
    act_rows, mf_rows, mw_rows, kkt_rows = [], [], [], []
    ik_s, id_s, so_s = [], [], []

    def grid_size(t_last):
        return int(np.floor((t_last - t0_cam) * OUTPUT_RATE_HZ + 1e-9)) + 1

    def extend_grid():
        """Resample newly-final 120 Hz samples from the filled 60 Hz rows."""
        t_src = t0_cam + (np.arange(len(filled))) / fps
        n_new = grid_size(t_src[-1])
        if n_new <= len(res_rows):
            return
        t = t0_cam + np.arange(len(res_rows), n_new) / OUTPUT_RATE_HZ
        j = np.clip(np.searchsorted(t_src, t), 0, t_src.size - 1)
        for jj in (j, np.maximum(j - 1, 0)):
            near = np.abs(t_src[jj] - t) < 1e-12 * (1.0 + np.abs(t))
            t[near] = t_src[jj[near]]
        src = np.asarray(filled)
        vals = np.column_stack([np.interp(t, t_src, src[:, c])
                                for c in range(src.shape[1])])
        for k in range(t.size):
            grid_times.append(t[k])
            res_rows.append(vals[k])
            csum.append(csum[-1] + vals[k])

    def smoothed_row(i, n_total):
        lo = max(i - half, 0)
        hi = min(i + half, n_total)
        return (csum[hi] - csum[lo]) / (hi - lo)

    def process_sample(i, n_total):
        nonlocal ekf_state, warm
        sm = smoothed_row(i, n_total).reshape(-1, 3)
        world = cam2world.apply(sm)
        meas = world[order]
        t_i = grid_times[i]
        if i == 0:
            ekf_state = ekf_init(model, meas, config.biomech_ekf)
            ik_s.append(0.0)
        else:
            tt = time.perf_counter()
            ekf_state = ekf_step(ekf_state, model, meas, dt,
                                 config.biomech_ekf)
            ik_s.append(time.perf_counter() - tt)
        qk = ekf_state.q
        if i == 0:
            qdk = np.zeros(model.ndof)
            qddk = np.zeros(model.ndof)
        else:
            qdk, qddk = ekf_state.qdot, ekf_state.qddot

        if config.forces:
            fk = np.array([np.interp(t_i, f_t, f_vals[:, c])
                           for c in range(3)])
            pk = np.array([np.interp(t_i, f_t, f_vals[:, c])
                           for c in range(3, 6)])
        else:
            fk = np.zeros(3)
            pk = np.zeros(3)
        if config.emg:
            ek = np.clip(np.array([np.interp(t_i, e_t, e_act[:, c])
                                   for c in range(e_act.shape[1])]), 0.0, 1.0)
        else:
            ek = np.zeros(8)

        tt = time.perf_counter()
        frames_k = model._dof_frames(qk)
        ext = []
        if np.any(fk):
            T = frames_k[0][hand_si]
            local = T[:3, :3].T @ (pk - T[:3, 3])
            ext.append(ExternalForce(hand_segment, local, -fk))
        tau_k = rnea(model, qk, qdk, qddk, frames=frames_k)
        if ext:
            tau_k = tau_k + external_torques(model, qk, ext, frames_k)
        id_s.append(time.perf_counter() - tt)
        tt = time.perf_counter()
        res = static_optimization(model, qk, qdk, tau_k, ek,
                                  config.so_weights, warm_start=warm)
        so_s.append(time.perf_counter() - tt)
        kkt_rows.append(res.kkt_residual)
        warm = np.concatenate([res.activations, res.residual_torques])
        mf = res.muscle_gain * res.activations + res.muscle_passive

        q_rows.append(qk)
        qd_rows.append(qdk)
        qdd_rows.append(qddk)
        tau_rows.append(tau_k)
        act_rows.append(res.activations)
        mf_rows.append(mf)
        mw_rows.append(world)
        w_q.write(t_i, qk)
        w_tau.write(t_i, tau_k)
        w_act.write(t_i, res.activations)
        w_mf.write(t_i, mf)
        w_mw.write(t_i, world.reshape(-1))

    gc_guard = _gc_paused()
    gc_guard.__enter__()
    for rec in records[1:]:
        frame = formats.load_frame(base, rec)
        tt = time.perf_counter()
        out = tracker.step(frame)
        track_s.append(time.perf_counter() - tt)
        px = np.array([m.pixel for m in out])
        cam3d = np.stack([m.cam3d for m in out])
        vis = [m.visibility.value for m in out]
        w_markers.write(frame.frame_number, frame.timestamp, px, cam3d, vis)
        t60.append(frame.timestamp)
        frame_numbers.append(frame.frame_number)
        m60.append(cam3d)
        px60.append(px)
        vis_all.append(vis)

        gap = frame.frame_number - (fn0 + len(filled) - 1)
        if gap > max_gap:
            raise RegistrationError(
                f"unrecoverable gap of {gap} frames after frame "
                f"{fn0 + len(filled) - 1}")
        if gap > 1:
            prev = filled[-1]
            cur = cam3d.reshape(-1)
            fn_prev = fn0 + len(filled) - 1
            fn_cur = frame.frame_number
            for fnum in range(fn_prev + 1, fn_cur):
                filled.append(np.array(
                    [np.interp(fnum, [fn_prev, fn_cur], [prev[c], cur[c]])
                     for c in range(cur.size)]))
        filled.append(cam3d.reshape(-1))
        extend_grid()
        # emit every sample whose smoothing window is complete
        while emitted + half <= len(res_rows):
            process_sample(emitted, len(res_rows))
            emitted += 1

    gc_guard.__exit__(None, None, None)

    # end of stream: flush samples with truncated trailing windows
    n_total = len(res_rows)
    while emitted < n_total:
        process_sample(emitted, n_total)
        emitted += 1

    for w in (w_markers, w_q, w_tau, w_act, w_mf, w_mw):
        w.close()

    track_arr = np.array(track_s)
    n_cam = track_arr.size - 1

    def per_camera_frame(samples):
        return np.array([chunk.sum()
                         for chunk in np.array_split(np.array(samples),
                                                     n_cam)])

    stage_ms = {
        "tracking": 1e3 * track_arr[1:],
        "inverse kinematics": 1e3 * per_camera_frame(ik_s),
        "inverse dynamics": 1e3 * per_camera_frame(id_s),
        "static optimization": 1e3 * per_camera_frame(so_s),
    }
    latency = latency_report(stage_ms,
                             filter_delay_frames=config
                             .moving_average_window // 2,
                             rate_hz=OUTPUT_RATE_HZ)
    with open(paths["latency"], "w") as f:
        json.dump(latency.to_dict(), f, indent=2)
        f.write("\n")

    result = PipelineResult(
        marker_names=names, track_times=np.array(t60),
        track_frame_numbers=np.array(frame_numbers),
        track_markers=np.stack(m60), track_pixels=np.stack(px60),
        track_vis=vis_all, times=np.array(grid_times),
        markers_world=np.stack(mw_rows), q=np.array(q_rows),
        qdot=np.array(qd_rows), qddot=np.array(qdd_rows),
        tau=np.array(tau_rows), activations=np.array(act_rows),
        muscle_forces=np.array(mf_rows), muscle_names=muscle_names,
        dof_names=list(model.dof_names), camera_to_world=cam2world,
        latency=latency, so_kkt=np.array(kkt_rows))
    return result, paths


# -- method comparison -----------------------------------------------------

def compare_methods(run_a: dict, run_b: dict, run_ref: dict,
                    labels: tuple[str, str] = ("AvREF", "BvREF")) -> list[dict]:
    """Agreement of two runs against a shared reference.

    Each run maps quantity name -> array (n, ...) on a common timebase.
    Returns one row per (quantity, pairing) with RMSD and Bland-Altman
    statistics."""
    rows = []
    for (run, tag) in ((run_a, labels[0]), (run_b, labels[1])):
        for key in run_ref:
            if key not in run:
                continue
            a = np.asarray(run[key], dtype=float)
            r = np.asarray(run_ref[key], dtype=float)
            if a.shape != r.shape:
                raise ValueError(
                    f"{key}: shape mismatch {a.shape} vs {r.shape} "
                    f"(runs must share the trial timebase)")
            ba = bland_altman(a.ravel(), r.ravel())
            rows.append({"quantity": key, "pairing": tag,
                         "rmsd": rmsd(a, r), "bias": ba.bias, "sd": ba.sd,
                         "loaLower": ba.loa_lower, "loaUpper": ba.loa_upper})
    return rows


def write_comparison_csv(path, rows: list[dict]):
    cols = ["quantity", "pairing", "rmsd", "bias", "sd", "loaLower",
            "loaUpper"]
    with open(path, "w", newline="") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(r[c] if isinstance(r[c], str) else repr(r[c])
                             for c in cols) + "\n")
