"""Per-frame marker tracking: blob detection, dual 2D prediction (sparse
pyramidal optical flow + constant-velocity Kalman), gated 2D correction, and
model-based 3D correction.

Each camera frame is processed in four steps per marker area:

1. preprocess + blob detection on the area's region of interest,
2. two independent 2D predictions of each marker pixel (optical flow from
   the previous frame, Kalman from the filter state), each snapped to the
   nearest blob within a 10 px gate,
3. fusion of the two corrected predictions (average when both snapped),
4. 3D correction: fused pixels are deprojected through the depth image,
   filtered through an EKF over the 4-segment tracking model, reprojected,
   and snapped to blobs once more. The final pixels seed the next frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import cv2
import numpy as np

from .camera import (FilterParams, Intrinsics, MissingDepthError, RgbdFrame,
                     deproject, depth_at, preprocess, project)
from .ekf import EkfConfig, EkfState, ekf_init, ekf_step
from .model import KinematicModel, SegmentDef

GATE_PX = 10.0

# markers grouped by the tracking-model segment they sit on; the shoulder
# area's markers split between the thorax-adjacent shoulder segment and the
# arm chain below it
SEGMENT_MARKERS = {
    "thorax": ["STER", "XIPH", "C7", "T10"],
    "shoulder": ["CLAV", "ACRO", "SCAP"],
    "arm": ["ARM1", "ARM2", "ELB"],
    "lowerarm": ["FARM1", "FARM2", "WRIST"],
}


class TrackingLostError(RuntimeError):
    def __init__(self, marker_names):
        self.marker_names = list(marker_names)
        super().__init__("tracking lost for markers: "
                         + ", ".join(self.marker_names))


class Visibility(str, Enum):
    VISIBLE = "Visible"
    PREDICTED = "Predicted"
    LOST = "Lost"


class Source(str, Enum):
    BLOB_SNAP = "BlobSnap"
    FLOW_ONLY = "FlowOnly"
    KALMAN_ONLY = "KalmanOnly"
    FUSED_PREDICTION = "FusedPrediction"
    MODEL_REPROJECTION = "ModelReprojection"


@dataclass(frozen=True)
class BlobCriteria:
    min_area: float = 20.0
    max_area: float = 2000.0
    min_circularity: float = 0.4
    min_convexity: float = 0.8
    min_intensity: int = 128

    def __post_init__(self):
        if not 0 < self.min_area <= self.max_area:
            raise ValueError("need 0 < min_area <= max_area")
        for v in (self.min_circularity, self.min_convexity):
            if not 0.0 <= v <= 1.0:
                raise ValueError("shape thresholds must lie in [0, 1]")


@dataclass(frozen=True)
class Blob:
    centroid: tuple[float, float]
    area: float
    circularity: float
    convexity: float


@dataclass
class TrackedMarker:
    name: str
    pixel: tuple[float, float]
    visibility: Visibility
    source: Source
    cam3d: np.ndarray | None = None
    depth_missing: bool = False


@dataclass
class AreaConfig:
    name: str
    roi: tuple[int, int, int, int]        # u0, v0, width, height
    filter_params: FilterParams
    blob_criteria: BlobCriteria
    marker_names: list[str]


def blob_criteria_from_dict(d: dict) -> BlobCriteria:
    return BlobCriteria(min_area=d.get("minArea", 20.0),
                        max_area=d.get("maxArea", 2000.0),
                        min_circularity=d.get("minCircularity", 0.4),
                        min_convexity=d.get("minConvexity", 0.8),
                        min_intensity=d.get("minIntensity", 128))


def blob_criteria_to_dict(c: BlobCriteria) -> dict:
    return {"minArea": c.min_area, "maxArea": c.max_area,
            "minCircularity": c.min_circularity,
            "minConvexity": c.min_convexity, "minIntensity": c.min_intensity}


def area_config_from_dict(d: dict) -> AreaConfig:
    from .formats import filter_params_from_dict
    return AreaConfig(name=d["name"], roi=tuple(d["roi"]),
                      filter_params=filter_params_from_dict(
                          d.get("filterParams", {})),
                      blob_criteria=blob_criteria_from_dict(
                          d.get("blobCriteria", {})),
                      marker_names=list(d["markerNames"]))


def area_config_to_dict(a: AreaConfig) -> dict:
    from .formats import filter_params_to_dict
    return {"name": a.name, "roi": list(a.roi),
            "filterParams": filter_params_to_dict(a.filter_params),
            "blobCriteria": blob_criteria_to_dict(a.blob_criteria),
            "markerNames": list(a.marker_names)}


def detect_blobs(binary: np.ndarray, criteria: BlobCriteria,
                 roi: tuple[int, int, int, int] | None = None) -> list[Blob]:
    """8-connected components of the binary image inside roi, filtered by
    area/circularity/convexity; centroid is the unweighted mean of member
    pixel coordinates. Output ordered by centroid (v, u)."""
    if roi is None:
        u0, v0 = 0, 0
        crop = binary
    else:
        u0, v0, w, h = roi
        crop = binary[v0:v0 + h, u0:u0 + w]
    mask = (crop >= criteria.min_intensity).astype(np.uint8)
    n, labels, stats, cents = cv2.connectedComponentsWithStats(
        mask, connectivity=8)
    blobs = []
    for k in range(1, n):
        area = float(stats[k, cv2.CC_STAT_AREA])
        if not criteria.min_area <= area <= criteria.max_area:
            continue
        x, y, w_, h_ = stats[k, :4]
        comp = (labels[y:y + h_, x:x + w_] == k).astype(np.uint8)
        contours, _ = cv2.findContours(comp, cv2.RETR_EXTERNAL,
                                       cv2.CHAIN_APPROX_NONE)
        perimeter = max(cv2.arcLength(contours[0], True), 1.0)
        circularity = min(4.0 * np.pi * area / perimeter ** 2, 1.0)
        hull_area = cv2.contourArea(cv2.convexHull(contours[0]))
        # a filled contour excludes the boundary pixel band; compare against
        # the pixel-count area consistently
        convexity = min(area / max(hull_area + perimeter / 2 + 1, area), 1.0)
        if circularity < criteria.min_circularity:
            continue
        if convexity < criteria.min_convexity:
            continue
        # component centroid = unweighted mean of member pixel coordinates
        blobs.append(Blob((float(cents[k, 0]) + u0, float(cents[k, 1]) + v0),
                          area, circularity, convexity))
    blobs.sort(key=lambda b: (b.centroid[1], b.centroid[0]))
    return blobs


@dataclass(frozen=True)
class LkConfig:
    levels: int = 3
    window: int = 21
    max_iter: int = 30
    epsilon: float = 0.01


def lk_flow(prev_gray: np.ndarray, gray: np.ndarray, points,
            cfg: LkConfig = LkConfig()) -> list[tuple[float, float, bool]]:
    """Sparse iterative pyramidal Lucas-Kanade tracking of pixel points."""
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 1, 2)
    if pts.size == 0:
        return []
    nxt, status, _ = cv2.calcOpticalFlowPyrLK(
        prev_gray, gray, pts, None,
        winSize=(cfg.window, cfg.window), maxLevel=cfg.levels - 1,
        criteria=(cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS,
                  cfg.max_iter, cfg.epsilon))
    return [(float(p[0, 0]), float(p[0, 1]), bool(s))
            for p, s in zip(nxt, status.ravel())]


# -- per-marker 2D Kalman filter (constant velocity) -----------------------

@dataclass
class Kalman2d:
    x: np.ndarray                  # (u, v, du, dv) in px, px/frame
    P: np.ndarray
    sigma_acc: float = 2.0         # px/frame^2 driving noise
    sigma_meas: float = 1.0        # px


def kalman2d_init(pixel, sigma_acc: float = 2.0,
                  sigma_meas: float = 1.0) -> Kalman2d:
    x = np.array([pixel[0], pixel[1], 0.0, 0.0])
    P = np.diag([sigma_meas ** 2, sigma_meas ** 2, 25.0, 25.0])
    return Kalman2d(x, P, sigma_acc, sigma_meas)


def kalman2d_predict(st: Kalman2d, dt: float = 1.0) -> Kalman2d:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    q = st.sigma_acc ** 2
    G = np.array([[0.5 * dt * dt, 0], [0, 0.5 * dt * dt], [dt, 0], [0, dt]])
    Q = q * G @ G.T
    return Kalman2d(F @ st.x, F @ st.P @ F.T + Q, st.sigma_acc, st.sigma_meas)


def kalman2d_correct(st: Kalman2d, meas) -> Kalman2d:
    H = np.zeros((2, 4))
    H[0, 0] = H[1, 1] = 1.0
    R = st.sigma_meas ** 2 * np.eye(2)
    S = H @ st.P @ H.T + R
    K = np.linalg.solve(S, H @ st.P).T
    x = st.x + K @ (np.asarray(meas, dtype=float) - H @ st.x)
    IKH = np.eye(4) - K @ H
    P = IKH @ st.P @ IKH.T + K @ R @ K.T
    return Kalman2d(x, P, st.sigma_acc, st.sigma_meas)


def correct_2d(predicted: list[TrackedMarker], blobs: list[Blob],
               gate=GATE_PX,
               allowed: list[set[int]] | None = None) -> list[TrackedMarker]:
    """Greedy nearest assignment of blobs to predicted markers within the
    gate; matched markers snap to the blob centroid, the rest keep their
    predicted pixel. Each blob serves at most one marker (closest wins, ties
    broken by marker list order). `gate` may be a scalar or one radius per
    marker; `allowed` optionally restricts each marker to a subset of blob
    indices."""
    gates = (list(gate) if np.iterable(gate)
             else [float(gate)] * len(predicted))
    pairs = []
    for mi, m in enumerate(predicted):
        for bi, b in enumerate(blobs):
            if allowed is not None and bi not in allowed[mi]:
                continue
            d = float(np.hypot(m.pixel[0] - b.centroid[0],
                               m.pixel[1] - b.centroid[1]))
            if d < gates[mi]:
                pairs.append((d, mi, bi))
    pairs.sort()
    taken_m, taken_b = set(), set()
    out = [replace(m, visibility=Visibility.PREDICTED) for m in predicted]
    for d, mi, bi in pairs:
        if mi in taken_m or bi in taken_b:
            continue
        taken_m.add(mi)
        taken_b.add(bi)
        out[mi] = replace(out[mi], pixel=blobs[bi].centroid,
                          visibility=Visibility.VISIBLE,
                          source=Source.BLOB_SNAP)
    return out


def fuse_predictions(flow: list[TrackedMarker],
                     kalman: list[TrackedMarker]) -> list[TrackedMarker]:
    """Average the two corrected predictions when both snapped to a blob;
    take the single snapped one otherwise; keep the last known pixel and
    mark Lost when neither did."""
    out = []
    for f, k in zip(flow, kalman):
        fv = f.visibility == Visibility.VISIBLE
        kv = k.visibility == Visibility.VISIBLE
        if fv and kv:
            px = ((f.pixel[0] + k.pixel[0]) / 2.0,
                  (f.pixel[1] + k.pixel[1]) / 2.0)
            out.append(TrackedMarker(f.name, px, Visibility.VISIBLE,
                                     Source.FUSED_PREDICTION))
        elif fv:
            out.append(TrackedMarker(f.name, f.pixel, Visibility.VISIBLE,
                                     Source.FLOW_ONLY))
        elif kv:
            out.append(TrackedMarker(k.name, k.pixel, Visibility.VISIBLE,
                                     Source.KALMAN_ONLY))
        else:
            out.append(TrackedMarker(f.name, f.pixel, Visibility.LOST,
                                     Source.FUSED_PREDICTION))
    return out


def _default_joint_centers(pos):
    """Anatomical joint-center estimates from surface markers: the
    sternoclavicular joint sits between the sternum and the vertebra prominens,
    the glenohumeral center just under the acromion, and the elbow axis at the
    lateral epicondyle marker."""
    return {
        "shoulder": 0.5 * (pos["STER"] + pos["C7"]),
        "arm": pos["ACRO"],
        "lowerarm": pos["ELB"],
    }


def build_tracking_model(marker_positions: dict[str, np.ndarray],
                         segment_markers: dict[str, list[str]] | None = None,
                         joint_centers: dict[str, np.ndarray] | None = None,
                         name: str = "tracking") -> KinematicModel:
    """Build the 4-segment tracking model from first-frame 3D marker
    positions: a free-floating thorax and three ball joints (shoulder, arm,
    lower arm). Ball-joint centers come from joint_centers (anatomical
    estimates by default; a rotation about a misplaced pivot cannot fit the
    markers, so pivot placement bounds the model fit)."""
    if segment_markers is None:
        segment_markers = SEGMENT_MARKERS
    chain = list(segment_markers)
    pos = {}
    for seg, names in segment_markers.items():
        missing = [n for n in names if n not in marker_positions]
        if missing:
            raise ValueError(f"missing 3D positions for markers {missing}")
        for n in names:
            pos[n] = np.asarray(marker_positions[n], dtype=float)
    origins = {chain[0]: np.mean([pos[n] for n in segment_markers[chain[0]]],
                                 axis=0)}
    origins.update(_default_joint_centers(pos) if joint_centers is None
                   else {k: np.asarray(v, dtype=float)
                         for k, v in joint_centers.items()})
    segs = []
    for i, seg in enumerate(chain):
        parent = chain[i - 1] if i else None
        offset = (origins[seg] - origins[parent]) if i else np.zeros(3)
        markers = tuple(
            (n, tuple(pos[n] - origins[seg]))
            for n in segment_markers[seg])
        segs.append(SegmentDef(seg, parent, "free" if i == 0 else "ball",
                               offset=tuple(offset), markers=markers))
    return KinematicModel(name, segs)


@dataclass
class TrackerConfig:
    gate: float = GATE_PX
    lk: LkConfig = field(default_factory=LkConfig)
    kalman_sigma_acc: float = 2.0
    kalman_sigma_meas: float = 1.0
    ekf: EkfConfig = field(default_factory=lambda: EkfConfig(
        n_derivatives=2, process_noise_qddot=200.0, measurement_noise=0.003,
        missing_marker_policy="drop_rows"))
    # innovation watchdog: pixels between fused prediction and model
    # reprojection, frames of consecutive excess before declaring loss
    innovation_bound_px: float = 40.0
    max_divergent_frames: int = 30
    missing_depth_inflation: float = 100.0
    # re-acquisition: widen the snap gate for markers that have gone
    # unsnapped (e.g. through a blob merge), so they can recover their blob
    # once it reappears even after the model estimate has drifted
    reacquire_gate_px_per_frame: float = 2.0
    max_gate_px: float = 30.0
    # merged-blob veto: refuse to snap to a blob whose pixel area exceeds
    # this multiple of the marker's running blob area (two markers whose
    # discs merge produce one oversized blob with a biased centroid)
    merge_area_ratio: float = 1.5
    blob_area_smoothing: float = 0.1
    # optical flow sanity bound: marker motion between consecutive frames is
    # physically limited, so a flow vector longer than this means the flow
    # lost its target (typically because the blob dropped out for a frame)
    # and latched onto a neighbor; fall back on the previous pixel instead
    flow_max_jump_px: float = 15.0
    # short dropouts coast on the 2D Kalman prediction with the last
    # measured depth, which stays within a couple of pixels over a few
    # frames; longer gaps switch to the rigid-model estimate, which is
    # less accurate but does not drift
    coast_with_kalman_frames: int = 15


class MarkerTracker:
    """Stateful per-trial tracker. Construct from the first labeled frame,
    then call step() once per subsequent frame."""

    def __init__(self, areas: list[AreaConfig], intrinsics: Intrinsics,
                 labels: dict[str, tuple[float, float]],
                 first_frame: RgbdFrame,
                 model: KinematicModel | None = None,
                 config: TrackerConfig = TrackerConfig()):
        self.areas = areas
        self.intr = intrinsics
        self.cfg = config
        self.marker_names = [n for a in areas for n in a.marker_names]
        if set(labels) != set(self.marker_names):
            raise ValueError("labels must cover exactly the configured "
                             "markers")
        self._area_of = {n: a for a in areas for n in a.marker_names}

        # first-frame 3D from the manual labels
        first3d = {}
        for n in self.marker_names:
            u, v = labels[n]
            z = depth_at(first_frame, u, v)
            first3d[n] = deproject(self.intr, u, v, z)
        if model is None:
            model = build_tracking_model(first3d)
        self.model = model
        self._midx = [model.marker_index(n) for n in self.marker_names]

        meas = np.full((len(model.marker_names), 3), np.nan)
        for n in self.marker_names:
            meas[model.marker_index(n)] = first3d[n]
        self.ekf = ekf_init(model, meas, config.ekf)

        self.pixels = {n: tuple(map(float, labels[n]))
                       for n in self.marker_names}
        self.kalman = {n: kalman2d_init(labels[n], config.kalman_sigma_acc,
                                        config.kalman_sigma_meas)
                       for n in self.marker_names}
        self.prev_gray = first_frame.gray
        self.prev_timestamp = first_frame.timestamp
        self._divergent = {n: 0 for n in self.marker_names}
        self._missed = {n: 0 for n in self.marker_names}
        self._depth_mm = {n: first3d[n][2] * 1000.0
                          for n in self.marker_names}
        # expected blob pixel area per marker, from the labeled first frame;
        # a blob claimed by several labels is already a merger, so each
        # claimant expects its share of it
        self._blob_area = {n: None for n in self.marker_names}
        blobs0 = self._detect_all(first_frame)
        clusters0 = self._cluster_blobs(blobs0)
        claims: dict[int, list[tuple[str, str, int]]] = {}
        for n in self.marker_names:
            aname = self._area_of[n].name
            best = None
            for bi, b in enumerate(blobs0[aname]):
                d = float(np.hypot(labels[n][0] - b.centroid[0],
                                   labels[n][1] - b.centroid[1]))
                if d < config.max_gate_px and (best is None or d < best[0]):
                    best = (d, bi)
            if best is not None:
                cid = clusters0[(aname, best[1])]
                claims.setdefault(cid, []).append((n, aname, best[1]))
        for members in claims.values():
            for n, aname, bi in members:
                self._blob_area[n] = blobs0[aname][bi].area / len(members)

    def _detect_all(self, frame: RgbdFrame) -> dict[str, list[Blob]]:
        out = {}
        for a in self.areas:
            # preprocess only the area's region of interest
            u0, v0, w, h = a.roi
            sub = RgbdFrame(frame.gray[v0:v0 + h, u0:u0 + w],
                            frame.depth[v0:v0 + h, u0:u0 + w],
                            frame.frame_number, frame.timestamp)
            binary = preprocess(sub, a.filter_params)
            found = detect_blobs(binary, a.blob_criteria)
            out[a.name] = [replace(b, centroid=(b.centroid[0] + u0,
                                                b.centroid[1] + v0))
                           for b in found]
        return out

    def step(self, frame: RgbdFrame) -> list[TrackedMarker]:
        cfg = self.cfg
        dt = frame.timestamp - self.prev_timestamp
        if not dt > 0:
            raise ValueError("frames must advance in time")
        blobs = self._detect_all(frame)

        # dual 2D prediction per marker (optical flow + Kalman), resolved in
        # one global assignment: a marker reaches a blob through whichever
        # prediction is closer, and each blob serves one marker
        pts = [self.pixels[n] for n in self.marker_names]
        flow_raw = lk_flow(self.prev_gray, frame.gray, pts, cfg.lk)
        pred, alt = [], []
        for n, (fu, fv, ok) in zip(self.marker_names, flow_raw):
            if ok and np.hypot(fu - self.pixels[n][0],
                               fv - self.pixels[n][1]) > cfg.flow_max_jump_px:
                ok = False
            px = (fu, fv) if ok else self.pixels[n]
            pred.append(TrackedMarker(n, px, Visibility.PREDICTED,
                                      Source.FLOW_ONLY))
            self.kalman[n] = kalman2d_predict(self.kalman[n], 1.0)
            kx = self.kalman[n].x
            alt.append((float(kx[0]), float(kx[1])))
        clusters = self._cluster_blobs(blobs)
        fused = self._correct_markers(pred, blobs, clusters, alt_pixels=alt)

        final = self._correct_3d(fused, frame, blobs, clusters, dt, alt)

        for m in final:
            self.pixels[m.name] = m.pixel
            # correct the Kalman track with real evidence (a snapped blob) or
            # with the rigid-model estimate during long gaps; during short
            # Kalman-coasted gaps the output pixel IS the Kalman prediction,
            # and feeding it back would just confirm the filter's own guess
            if (m.visibility == Visibility.VISIBLE
                    or m.source == Source.MODEL_REPROJECTION):
                self.kalman[m.name] = kalman2d_correct(self.kalman[m.name],
                                                       m.pixel)
            visible = m.visibility == Visibility.VISIBLE
            self._missed[m.name] = 0 if visible else self._missed[m.name] + 1
            if visible:
                for b in blobs[self._area_of[m.name].name]:
                    if b.centroid == m.pixel:
                        prev = self._blob_area[m.name]
                        w = self.cfg.blob_area_smoothing
                        self._blob_area[m.name] = (
                            b.area if prev is None
                            else (1 - w) * prev + w * b.area)
                        break
        self.prev_gray = frame.gray
        self.prev_timestamp = frame.timestamp
        return final

    def _cluster_blobs(self, blobs: dict[str, list[Blob]]) -> dict:
        """Group per-area detections of the same physical blob. Area regions
        of interest may overlap, so one blob can be detected by several areas
        (with slightly different centroids, since each area runs its own
        filter chain). Returns (area name, blob index) -> cluster id; the
        one-blob-one-marker rule is enforced per cluster."""
        reps: list[tuple[float, float]] = []
        cluster: dict[tuple[str, int], int] = {}
        for a in self.areas:
            for bi, b in enumerate(blobs[a.name]):
                for ci, (u, v) in enumerate(reps):
                    if np.hypot(b.centroid[0] - u, b.centroid[1] - v) < 2.0:
                        cluster[(a.name, bi)] = ci
                        break
                else:
                    cluster[(a.name, bi)] = len(reps)
                    reps.append(b.centroid)
        return cluster

    def _correct_markers(self, markers: list[TrackedMarker],
                         blobs: dict[str, list[Blob]],
                         clusters: dict,
                         taken: set | None = None,
                         alt_pixels: list | None = None) \
            -> list[TrackedMarker]:
        """Greedy nearest blob assignment, one-to-one across all areas
        (closest wins). Each marker considers its own area's detections only,
        within a gate that widens while the marker stays unsnapped; blobs
        large enough to be two merged markers are vetoed. Markers already
        Visible pass through untouched; `taken` pre-claims blob clusters;
        `alt_pixels` supplies a second prediction per marker (the closer of
        the two reaches the blob)."""
        cfg = self.cfg
        pairs = []
        for mi, m in enumerate(markers):
            if m.visibility == Visibility.VISIBLE:
                continue
            area = self._area_of[m.name].name
            gate = min(cfg.gate + cfg.reacquire_gate_px_per_frame
                       * self._missed[m.name], cfg.max_gate_px)
            ema = self._blob_area[m.name]
            preds = [m.pixel]
            if alt_pixels is not None:
                preds.append(alt_pixels[mi])
            for bi, b in enumerate(blobs[area]):
                if ema is not None and b.area > cfg.merge_area_ratio * ema:
                    continue
                d = min(float(np.hypot(p[0] - b.centroid[0],
                                       p[1] - b.centroid[1]))
                        for p in preds)
                if d < gate:
                    pairs.append((d, mi, (area, bi)))
        pairs.sort()
        taken_m, taken_c = set(), set(taken or ())
        out = [m if m.visibility == Visibility.VISIBLE
               else replace(m, visibility=Visibility.PREDICTED)
               for m in markers]
        for d, mi, key in pairs:
            cid = clusters[key]
            if mi in taken_m or cid in taken_c:
                continue
            taken_m.add(mi)
            taken_c.add(cid)
            b = blobs[key[0]][key[1]]
            out[mi] = replace(out[mi], pixel=b.centroid,
                              visibility=Visibility.VISIBLE,
                              source=Source.BLOB_SNAP)
        return out

    def _correct_3d(self, fused: list[TrackedMarker], frame: RgbdFrame,
                    blobs: dict[str, list[Blob]], clusters: dict, dt: float,
                    kalman_pixels: list | None = None):
        cfg = self.cfg
        n_model = len(self.model.marker_names)
        meas = np.full((n_model, 3), np.nan)
        sigma = np.full(n_model, cfg.ekf.measurement_noise)
        _, pred3d = self.model.forward_kinematics(self.ekf.q)
        depth_flags = {}
        for m, mi in zip(fused, self._midx):
            depth_flags[m.name] = False
            if m.visibility != Visibility.VISIBLE:
                # unsnapped markers contribute no measurement; the model
                # coasts them through the gap
                continue
            try:
                z = depth_at(frame, m.pixel[0], m.pixel[1])
            except MissingDepthError:
                # fall back on the model-predicted depth, at low confidence
                z = pred3d[mi][2] * 1000.0
                sigma[mi] *= cfg.missing_depth_inflation
                depth_flags[m.name] = True
                if not z > 0:
                    continue
            meas[mi] = deproject(self.intr, m.pixel[0], m.pixel[1], z)
        self.ekf = ekf_step(self.ekf, self.model, meas, dt, cfg.ekf)

        _, model3d = self.model.forward_kinematics(self.ekf.q)

        # measurements stay authoritative: markers the fusion stage snapped
        # keep their measured pixel. The model only serves the unsnapped
        # ones, whose reprojection gets a chance to re-acquire one of the
        # blob clusters the snapped markers did not claim.
        taken = set()
        prelim = []
        kalman_coast = {}
        for i, (m, mi) in enumerate(zip(fused, self._midx)):
            if m.visibility == Visibility.VISIBLE:
                area = self._area_of[m.name].name
                for bi, b in enumerate(blobs[area]):
                    if b.centroid == m.pixel:
                        taken.add(clusters[(area, bi)])
                        break
                prelim.append(TrackedMarker(m.name, m.pixel,
                                            Visibility.VISIBLE, m.source))
            elif (kalman_pixels is not None
                  and self._missed[m.name] < cfg.coast_with_kalman_frames):
                kalman_coast[m.name] = True
                prelim.append(TrackedMarker(m.name, kalman_pixels[i],
                                            Visibility.PREDICTED,
                                            Source.KALMAN_ONLY))
            else:
                px = project(self.intr, model3d[mi])
                prelim.append(TrackedMarker(m.name, px, Visibility.PREDICTED,
                                            Source.MODEL_REPROJECTION))
        final = self._correct_markers(prelim, blobs, clusters, taken)

        lost = []
        for m, f, mi in zip(fused, final, self._midx):
            # snapped markers get the measured 3D (pixel + depth); unsnapped
            # ones coast on the Kalman pixel with the last measured depth
            # for short gaps, or fall back on the model estimate
            if kalman_coast.get(f.name) and f.source == Source.KALMAN_ONLY:
                f.cam3d = deproject(self.intr, f.pixel[0], f.pixel[1],
                                    self._depth_mm[f.name])
            else:
                f.cam3d = model3d[mi].copy()
            f.depth_missing = depth_flags[m.name]
            if f.visibility == Visibility.VISIBLE:
                try:
                    z = depth_at(frame, f.pixel[0], f.pixel[1])
                    f.cam3d = deproject(self.intr, f.pixel[0], f.pixel[1], z)
                    self._depth_mm[f.name] = z
                except MissingDepthError:
                    f.depth_missing = True
            # watchdog: a snapped marker drifting far from the model estimate
            # for many consecutive frames means the track went wrong
            innov = np.hypot(f.pixel[0] - project(self.intr, model3d[mi])[0],
                             f.pixel[1] - project(self.intr, model3d[mi])[1])
            bad = (f.visibility == Visibility.VISIBLE
                   and innov > cfg.innovation_bound_px)
            self._divergent[m.name] = self._divergent[m.name] + 1 if bad else 0
            if self._divergent[m.name] > cfg.max_divergent_frames:
                lost.append(m.name)
        if lost:
            raise TrackingLostError(lost)
        return final
