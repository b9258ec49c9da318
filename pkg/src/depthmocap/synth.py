"""Synthetic crank-pedaling scene generator.

Stands in for the human subject, the RGBD camera, the reference mocap
system, the instrumented pedal, and the EMG amplifier. The hand follows a
crank circle at a fixed cadence; joint trajectories come from damped
least-squares inverse kinematics on the biomechanical model; frames, force
plates, EMG, and a low-noise reference marker stream are derived from that
single ground truth.

Determinism: every random draw comes from numpy's default PCG64 generator
seeded with (scenario seed, stream index), one independent stream per frame
or signal channel, so outputs are byte-identical across runs and platforms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from .camera import Intrinsics, RgbdFrame, project
from .model import KinematicModel

TRUTH_RATE_HZ = 120.0
FRAME_RATE_HZ = 60.0
FORCE_RATE_HZ = 100.0
EMG_RATE_HZ = 2160.0
MARKER_SIZE_M = 0.02               # physical marker edge length
REFERENCE_SIGMA_M = 1e-4           # reference mocap noise, 0.1 mm

BACKGROUND_GRAY = 40
BACKGROUND_DEPTH_MM = 3000
BODY_GRAY = 90

DEFAULT_INTRINSICS = Intrinsics(fx=420.0, fy=420.0, cx=424.0, cy=240.0,
                                width=848, height=480)


class WorkspaceError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    pixel_sigma: float = 0.0       # px jitter on marker centers
    depth_sigma: float = 0.0       # mm
    blob_drop_prob: float = 0.0
    false_blob_rate: float = 0.0   # expected false blobs per frame
    emg_snr: float = 10.0
    frame_drop_prob: float = 0.0

    def __post_init__(self):
        for p in (self.blob_drop_prob, self.frame_drop_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class CameraPose:
    """World -> camera: p_cam = rotation @ (p_world - position).

    The default is an oblique elevated front view about 1 m from the
    marker cloud, found by searching camera positions for the best worst-
    case blob clearance at a modest image footprint: over the steady-state
    crank cycle every pair of projected markers keeps at least 8 px of
    clear space between blob edges, so no two markers ever merge in the
    image (front and back thorax markers would overlap head-on), while the
    tracked regions stay small enough for real-time processing.
    """
    position: tuple = (0.6987, -0.4669, 0.5173)
    rotation: tuple = (
        (0.6660591525386624, 0.7458989243318955, -0.0),
        (0.29742091620351907, -0.26558547938814536, -0.9170633302792279),
        (-0.6840365515995019, 0.6108184245900661, -0.3987415807978542))

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        R = np.asarray(self.rotation, dtype=float)
        return (pts - np.asarray(self.position)) @ R.T


@dataclass(frozen=True)
class ScenarioConfig:
    cadence_rpm: float = 60.0
    duration_s: float = 10.0
    crank_radius: float = 0.1
    resistance_w: float = 20.0
    crank_center: tuple = (0.30, 0.21, 0.05)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    camera: CameraPose = field(default_factory=CameraPose)
    seed: int = 0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if self.crank_radius <= 0:
            raise ValueError("crank radius must be positive")


def scenario_to_dict(sc: ScenarioConfig) -> dict:
    return {
        "cadenceRpm": sc.cadence_rpm, "durationS": sc.duration_s,
        "crankRadius": sc.crank_radius, "resistanceW": sc.resistance_w,
        "crankCenter": list(sc.crank_center),
        "noise": {"pixelSigma": sc.noise.pixel_sigma,
                  "depthSigma": sc.noise.depth_sigma,
                  "blobDropProb": sc.noise.blob_drop_prob,
                  "falseBlobRate": sc.noise.false_blob_rate,
                  "emgSnr": sc.noise.emg_snr,
                  "frameDropProb": sc.noise.frame_drop_prob},
        "cameraPose": {"position": list(sc.camera.position),
                       "rotation": [list(r) for r in sc.camera.rotation]},
        "seed": sc.seed,
    }


def scenario_from_dict(d: dict) -> ScenarioConfig:
    n = d.get("noise", {})
    cp = d.get("cameraPose", {})
    cam = CameraPose(
        position=tuple(cp["position"]) if "position" in cp
        else CameraPose.position,
        rotation=tuple(map(tuple, cp["rotation"])) if "rotation" in cp
        else CameraPose.rotation)
    return ScenarioConfig(
        cadence_rpm=d.get("cadenceRpm", 60.0),
        duration_s=d.get("durationS", 10.0),
        crank_radius=d.get("crankRadius", 0.1),
        resistance_w=d.get("resistanceW", 20.0),
        crank_center=tuple(d.get("crankCenter", (0.30, 0.21, 0.05))),
        noise=NoiseConfig(pixel_sigma=n.get("pixelSigma", 0.0),
                          depth_sigma=n.get("depthSigma", 0.0),
                          blob_drop_prob=n.get("blobDropProb", 0.0),
                          false_blob_rate=n.get("falseBlobRate", 0.0),
                          emg_snr=n.get("emgSnr", 10.0),
                          frame_drop_prob=n.get("frameDropProb", 0.0)),
        camera=cam, seed=int(d.get("seed", 0)))


def load_scenario(path) -> ScenarioConfig:
    with open(path) as f:
        return scenario_from_dict(json.load(f))


def save_scenario(path, sc: ScenarioConfig):
    with open(path, "w") as f:
        json.dump(scenario_to_dict(sc), f, indent=2)
        f.write("\n")


# -- ground truth ----------------------------------------------------------

@dataclass
class Truth:
    times: np.ndarray              # (n,), 120 Hz
    q: np.ndarray                  # (n, ndof)
    qdot: np.ndarray
    qddot: np.ndarray
    markers: np.ndarray            # (n, n_markers, 3) world frame
    crank_angle: np.ndarray        # (n,)
    marker_names: list[str]
    dof_names: list[str]


def crank_position(sc: ScenarioConfig, phi):
    c = np.asarray(sc.crank_center)
    phi = np.asarray(phi)
    out = np.zeros(phi.shape + (3,))
    out[...] = c
    out[..., 0] += sc.crank_radius * np.cos(phi)
    out[..., 2] += sc.crank_radius * np.sin(phi)
    return out


def generate_truth(model: KinematicModel, sc: ScenarioConfig,
                   endpoint_marker: str = "WRIST") -> Truth:
    """Drive the endpoint marker around the crank circle and solve the joint
    trajectory by damped least-squares IK, warm-started frame to frame."""
    n = int(round(sc.duration_s * TRUTH_RATE_HZ)) + 1   # inclusive endpoint
    times = np.arange(n) / TRUTH_RATE_HZ
    omega = 2.0 * np.pi * sc.cadence_rpm / 60.0
    phi = omega * times
    targets = crank_position(sc, phi)

    mi = model.marker_index(endpoint_marker)
    rows = slice(3 * mi, 3 * mi + 3)
    q = np.zeros((n, model.ndof))
    qk = np.zeros(model.ndof)
    lam = 1e-6
    alpha = 0.05                   # null-space pull toward neutral posture
    for k in range(n):
        for it in range(200):
            _, mk = model.forward_kinematics(qk)
            r = targets[k] - mk[mi]
            if np.linalg.norm(r) < 1e-9:
                break
            J = model.marker_jacobian(qk)[rows]
            JJt = J @ J.T + lam * np.eye(3)
            # one null-space step toward q = 0 per frame anchors the
            # redundant dofs so the posture settles into the same limit
            # cycle every crank revolution instead of drifting; the
            # remaining iterations are pure task steps that polish the
            # endpoint residual
            dq_null = -alpha * qk if it == 0 else np.zeros_like(qk)
            qk = qk + J.T @ np.linalg.solve(JJt, r - J @ dq_null) + dq_null
        else:
            if np.linalg.norm(r) > 1e-6:
                raise WorkspaceError(
                    f"crank circle unreachable at angle {phi[k]:.3f} rad "
                    f"(residual {np.linalg.norm(r):.3e} m)")
        q[k] = qk

    markers = np.stack([model.forward_kinematics(qi)[1] for qi in q])
    qdot = np.gradient(q, times, axis=0)
    qddot = np.gradient(qdot, times, axis=0)
    return Truth(times, q, qdot, qddot, markers, phi,
                 list(model.marker_names), list(model.dof_names))


# -- rendering -------------------------------------------------------------

AREA_MARKERS = {
    "thorax": ["STER", "XIPH", "C7", "T10"],
    "shoulder": ["CLAV", "ACRO", "SCAP"],
    "arm": ["ARM1", "ARM2", "ELB", "FARM1", "FARM2", "WRIST"],
}

# coarse body silhouette: the convex hull of each area's markers, inflated
# so every marker sits on a locally uniform body region (an asymmetric
# background would bias the thresholded blob centroids)
BODY_INFLATE_PX = 24


def _axis_span(center: float, side: float, limit: int):
    """Integer pixel span whose unweighted centroid is closest to center.

    An odd pixel count puts the set centroid on an integer, an even count on
    a half-integer; picking the better parity bounds the rasterization error
    to 0.25 px. A symmetric pixel set also stays symmetric through blur and
    threshold, so the detected blob centroid inherits the same accuracy.
    """
    w = max(int(np.floor(side)), 2)
    best = None
    for wk in (w, w + 1):
        lo = int(round(center - (wk - 1) / 2.0))
        err = abs(lo + (wk - 1) / 2.0 - center)
        if best is None or err < best[0]:
            best = (err, lo, wk)
    _, lo, wk = best
    return max(lo, 0), min(lo + wk, limit)


def _draw_square(gray, depth, uc, vc, side, intensity, z_mm):
    h, w = gray.shape
    u0, u1 = _axis_span(uc, side, w)
    v0, v1 = _axis_span(vc, side, h)
    if u1 > u0 and v1 > v0:
        gray[v0:v1, u0:u1] = intensity
        depth[v0:v1, u0:u1] = z_mm


def render_frame(cam_markers: np.ndarray, marker_names: list[str],
                 intr: Intrinsics, sc: ScenarioConfig, frame_index: int,
                 frame_number: int, timestamp: float) -> RgbdFrame:
    """Render one RGBD frame from camera-space marker positions."""
    rng = np.random.default_rng([sc.seed, frame_index])
    gray = np.full((intr.height, intr.width), BACKGROUND_GRAY, dtype=np.uint8)
    depth = np.full((intr.height, intr.width), BACKGROUND_DEPTH_MM,
                    dtype=np.uint16)

    px = {}
    for name, p in zip(marker_names, cam_markers):
        px[name] = (project(intr, p), p[2])

    for names in AREA_MARKERS.values():
        pts = [px[n] for n in names if n in px]
        if not pts:
            continue
        uv = np.array([[round(u), round(v)] for (u, v), _ in pts],
                      dtype=np.int32)
        z_mm = int(round(np.mean([z for _, z in pts]) * 1000.0)) + 40
        hull = cv2.convexHull(uv)
        for img, val in ((gray, BODY_GRAY), (depth, z_mm)):
            cv2.fillConvexPoly(img, hull, val)
            cv2.polylines(img, [hull], True, val, 2 * BODY_INFLATE_PX)

    n_false = rng.poisson(sc.noise.false_blob_rate) \
        if sc.noise.false_blob_rate > 0 else 0
    for _ in range(n_false):
        fu = rng.uniform(20, intr.width - 20)
        fv = rng.uniform(20, intr.height - 20)
        side = rng.uniform(6, 12)
        inten = int(rng.integers(230, 256))
        z_mm = int(rng.uniform(700, 1300))
        _draw_square(gray, depth, fu, fv, side, inten, z_mm)

    for name, p in zip(marker_names, cam_markers):
        if sc.noise.blob_drop_prob > 0 and rng.random() < sc.noise.blob_drop_prob:
            continue
        (u, v), z = px[name]
        if sc.noise.pixel_sigma > 0:
            u += rng.normal(scale=sc.noise.pixel_sigma)
            v += rng.normal(scale=sc.noise.pixel_sigma)
        side = MARKER_SIZE_M * intr.fx / z
        inten = int(rng.integers(230, 256))
        z_mm = z * 1000.0
        if sc.noise.depth_sigma > 0:
            z_mm += rng.normal(scale=sc.noise.depth_sigma)
        _draw_square(gray, depth, u, v, side, inten,
                     int(np.clip(round(z_mm), 1, 65535)))
    return RgbdFrame(gray, depth, frame_number, timestamp)


def render_frames(truth: Truth, intr: Intrinsics, sc: ScenarioConfig):
    """Frames at 60 Hz (every 2nd truth sample) plus the init-file content.

    Returns (frames, area_config_dicts, labels). Frame numbers advance by 1
    per camera tick; dropped frames are simply not emitted.
    """
    step = int(round(TRUTH_RATE_HZ / FRAME_RATE_HZ))
    idx = np.arange(0, truth.times.size, step)
    cam_all = np.stack([sc.camera.to_camera(truth.markers[i]) for i in idx])
    if np.any(cam_all[..., 2] <= 0):
        raise WorkspaceError("markers behind the camera")

    # per-area ROI bounding all frames' marker pixels, with margin
    pix = np.zeros(cam_all.shape[:2] + (2,))
    for i in range(cam_all.shape[0]):
        for j in range(cam_all.shape[1]):
            pix[i, j] = project(intr, cam_all[i, j])
    name_idx = {n: j for j, n in enumerate(truth.marker_names)}
    margin = 20
    areas = []
    from .camera import FilterParams
    from .formats import filter_params_to_dict
    from .tracking import BlobCriteria, blob_criteria_to_dict
    fp = filter_params_to_dict(FilterParams(background_depth_max=1600))
    crit = blob_criteria_to_dict(BlobCriteria(min_area=15, max_area=400,
                                              min_circularity=0.4,
                                              min_convexity=0.7))
    for area, names in AREA_MARKERS.items():
        cols = [name_idx[n] for n in names]
        sub = pix[:, cols].reshape(-1, 2)
        u0 = max(int(sub[:, 0].min()) - margin, 0)
        v0 = max(int(sub[:, 1].min()) - margin, 0)
        u1 = min(int(sub[:, 0].max()) + margin + 1, intr.width)
        v1 = min(int(sub[:, 1].max()) + margin + 1, intr.height)
        areas.append({"name": area, "roi": [u0, v0, u1 - u0, v1 - v0],
                      "filterParams": fp, "blobCriteria": crit,
                      "markerNames": names})
    labels = {n: list(pix[0, name_idx[n]]) for n in truth.marker_names}

    drop_rng = np.random.default_rng([sc.seed, 2 ** 31])
    frames = []
    for k in range(idx.size):
        dropped = (k > 0 and sc.noise.frame_drop_prob > 0
                   and drop_rng.random() < sc.noise.frame_drop_prob)
        if dropped:
            continue
        frames.append(render_frame(cam_all[k], truth.marker_names, intr, sc,
                                   k, k, truth.times[idx[k]]))
    return frames, areas, labels


# -- forces, EMG, reference markers ----------------------------------------

@dataclass
class Signals:
    force_times: np.ndarray
    forces: np.ndarray             # (n, 3) pedal force exerted by the hand, N
    force_points: np.ndarray       # (n, 3) application points, world
    emg_times: np.ndarray
    emg: np.ndarray                # (n, 8) raw channels
    mvc_trials: list[np.ndarray]   # raw maximal-effort recordings
    ref_times: np.ndarray
    ref_markers: np.ndarray        # (n, n_markers, 3) world + 0.1 mm noise
    activations: np.ndarray        # (n_emg, 8) ground-truth profiles


N_EMG_CHANNELS = 8


def activation_profile(phi: np.ndarray, channel: int) -> np.ndarray:
    """Phase-locked raised-cosine bump, one phase offset per channel."""
    center = 2.0 * np.pi * channel / N_EMG_CHANNELS
    bump = 0.5 * (1.0 + np.cos(phi - center))
    return 0.1 + 0.45 * bump ** 2


def synthesize_signals(truth: Truth, sc: ScenarioConfig) -> Signals:
    omega = 2.0 * np.pi * sc.cadence_rpm / 60.0
    t_end = truth.times[-1]

    # pedal force: tangential, magnitude resistance / hand speed
    ft = np.arange(int(np.floor(t_end * FORCE_RATE_HZ)) + 1) / FORCE_RATE_HZ
    phi = omega * ft
    tangent = np.stack([-np.sin(phi), np.zeros_like(phi), np.cos(phi)],
                       axis=1)
    mag = sc.resistance_w / (omega * sc.crank_radius) \
        if sc.resistance_w > 0 else 0.0
    forces = mag * tangent
    points = crank_position(sc, phi)

    # EMG: unit white noise carrier amplitude-modulated by the activation
    # profile, plus a noise floor set by the SNR
    et = np.arange(int(np.floor(t_end * EMG_RATE_HZ)) + 1) / EMG_RATE_HZ
    ephi = omega * et
    emg = np.zeros((et.size, N_EMG_CHANNELS))
    acts = np.zeros((et.size, N_EMG_CHANNELS))
    for ch in range(N_EMG_CHANNELS):
        rng = np.random.default_rng([sc.seed, 10_000_000 + ch])
        a = activation_profile(ephi, ch)
        acts[:, ch] = a
        carrier = rng.normal(size=et.size)
        floor = rng.normal(size=et.size) / max(sc.noise.emg_snr, 1e-9)
        emg[:, ch] = a * carrier + floor

    mvc_len = int(3 * EMG_RATE_HZ)
    mvc_trials = []
    for trial in range(2):
        raw = np.zeros((mvc_len, N_EMG_CHANNELS))
        for ch in range(N_EMG_CHANNELS):
            rng = np.random.default_rng([sc.seed, 20_000_000
                                         + trial * 100 + ch])
            raw[:, ch] = rng.normal(size=mvc_len)
        mvc_trials.append(raw)

    rng = np.random.default_rng([sc.seed, 30_000_000])
    ref = truth.markers + rng.normal(scale=REFERENCE_SIGMA_M,
                                     size=truth.markers.shape)
    return Signals(ft, forces, points, et, emg, mvc_trials,
                   truth.times.copy(), ref, acts)


# -- dataset on disk -------------------------------------------------------

def write_dataset(outdir, model: KinematicModel, sc: ScenarioConfig,
                  intr: Intrinsics = DEFAULT_INTRINSICS) -> dict:
    """Generate and write a full trial: frames + manifest, init file,
    scenario, ground truth, forces, EMG, MVC trials, reference markers.

    Returns a dict of the written paths.
    """
    import os
    from . import formats

    os.makedirs(outdir, exist_ok=True)
    # the simulated subject is seated with the trunk strapped to the seat
    # back, matching the locked-root assumption the tracking pipeline makes;
    # only the arm chain moves, so truth joint angles line up one-to-one
    # with the pipeline's estimates
    if any(s.parent is None and s.joint == "free" for s in model.segments):
        model = model.with_root_locked()
    truth = generate_truth(model, sc)
    frames, areas, labels = render_frames(truth, intr, sc)
    signals = synthesize_signals(truth, sc)

    records = []
    frame_dir = os.path.join(outdir, "frames")
    os.makedirs(frame_dir, exist_ok=True)
    for i, fr in enumerate(frames):
        gp = os.path.join("frames", f"gray_{i:05d}.pgm")
        dp = os.path.join("frames", f"depth_{i:05d}.pgm")
        formats.write_pgm(os.path.join(outdir, gp), fr.gray)
        formats.write_pgm(os.path.join(outdir, dp), fr.depth)
        records.append({"index": i, "frameNumber": fr.frame_number,
                        "timestamp": fr.timestamp, "grayPath": gp,
                        "depthPath": dp})
    paths = {"manifest": os.path.join(outdir, "manifest.json"),
             "init": os.path.join(outdir, "init.json"),
             "scenario": os.path.join(outdir, "scenario.json"),
             "truth_q": os.path.join(outdir, "truth_q.csv"),
             "truth_markers": os.path.join(outdir, "truth_markers.csv"),
             "forces": os.path.join(outdir, "forces.csv"),
             "emg": os.path.join(outdir, "emg.csv"),
             "reference_markers": os.path.join(outdir,
                                               "reference_markers.csv")}
    formats.write_manifest(paths["manifest"], intr, FRAME_RATE_HZ, records)
    formats.write_init_file(paths["init"], areas, labels)
    save_scenario(paths["scenario"], sc)

    formats.write_series_csv(paths["truth_q"], truth.dof_names, truth.times,
                             truth.q)
    mcols = [f"{n}_{ax}" for n in truth.marker_names for ax in "xyz"]
    formats.write_series_csv(paths["truth_markers"], mcols, truth.times,
                             truth.markers.reshape(truth.times.size, -1))
    formats.write_series_csv(paths["forces"],
                             ["fx", "fy", "fz", "px", "py", "pz"],
                             signals.force_times,
                             np.hstack([signals.forces,
                                        signals.force_points]))
    formats.write_series_csv(paths["emg"],
                             [f"ch{c}" for c in range(N_EMG_CHANNELS)],
                             signals.emg_times, signals.emg)
    for i, trial in enumerate(signals.mvc_trials):
        p = os.path.join(outdir, f"emg_mvc_{i}.csv")
        paths[f"mvc_{i}"] = p
        formats.write_series_csv(p, [f"ch{c}" for c in range(N_EMG_CHANNELS)],
                                 np.arange(trial.shape[0]) / EMG_RATE_HZ,
                                 trial)
    formats.write_series_csv(paths["reference_markers"], mcols,
                             signals.ref_times,
                             signals.ref_markers.reshape(
                                 signals.ref_times.size, -1))
    return paths
