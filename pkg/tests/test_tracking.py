import numpy as np
import pytest

from depthmocap.camera import FilterParams, Intrinsics, RgbdFrame, project
from depthmocap.tracking import (
    AreaConfig, Blob, BlobCriteria, MarkerTracker, Source, TrackedMarker,
    TrackerConfig, Visibility, build_tracking_model, correct_2d, detect_blobs,
    fuse_predictions, kalman2d_correct, kalman2d_init, kalman2d_predict,
    lk_flow,
)

INTR = Intrinsics(fx=420.0, fy=420.0, cx=424.0, cy=240.0,
                  width=848, height=480)


# -- blob detection --------------------------------------------------------

def test_square_blob_centroid_and_area():
    img = np.zeros((480, 848), dtype=np.uint8)
    img[100:110, 100:110] = 255
    blobs = detect_blobs(img, BlobCriteria())
    assert len(blobs) == 1
    assert blobs[0].centroid == (104.5, 104.5)
    assert blobs[0].area == 100


def test_two_squares_one_column_apart():
    img = np.zeros((100, 100), dtype=np.uint8)
    img[10:20, 10:20] = 255
    img[10:20, 21:31] = 255     # one black column at u=20
    blobs = detect_blobs(img, BlobCriteria())
    assert len(blobs) == 2


def test_speck_filtered_by_area():
    img = np.zeros((50, 50), dtype=np.uint8)
    img[25, 25] = 255
    assert detect_blobs(img, BlobCriteria(min_area=4)) == []


def test_roi_limits_detection():
    img = np.zeros((100, 200), dtype=np.uint8)
    img[10:20, 10:20] = 255
    img[10:20, 150:160] = 255
    blobs = detect_blobs(img, BlobCriteria(), roi=(0, 0, 100, 100))
    assert len(blobs) == 1
    assert blobs[0].centroid[0] < 100


def test_elongated_blob_fails_circularity():
    img = np.zeros((100, 200), dtype=np.uint8)
    img[50:53, 20:120] = 255    # 3x100 bar
    assert detect_blobs(img, BlobCriteria(min_circularity=0.4,
                                          max_area=10000)) == []


def test_blob_ordering_by_row_then_column():
    img = np.zeros((100, 100), dtype=np.uint8)
    img[60:70, 10:20] = 255
    img[10:20, 60:70] = 255
    img[10:20, 10:20] = 255
    blobs = detect_blobs(img, BlobCriteria())
    cents = [b.centroid for b in blobs]
    assert cents == sorted(cents, key=lambda c: (c[1], c[0]))


# -- optical flow ----------------------------------------------------------

def textured_image(seed=0):
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 256, size=(240, 320)).astype(np.uint8)
    import cv2
    return cv2.blur(base, (3, 3))


def test_lk_identity_zero_flow():
    img = textured_image()
    pts = [(100.0, 100.0), (200.0, 150.0)]
    out = lk_flow(img, img, pts)
    for (u, v, ok), (u0, v0) in zip(out, pts):
        assert ok
        assert abs(u - u0) < 0.05 and abs(v - v0) < 0.05


def test_lk_small_translation():
    img = textured_image()
    shifted = np.roll(img, 3, axis=1)
    out = lk_flow(img, shifted, [(100.0, 100.0), (150.0, 120.0)])
    for u, v, ok in out:
        assert ok
    assert abs(out[0][0] - 103.0) < 0.2 and abs(out[0][1] - 100.0) < 0.2


def test_lk_large_translation_needs_pyramid():
    img = textured_image(1)
    shifted = np.roll(np.roll(img, 8, axis=1), 5, axis=0)
    out = lk_flow(img, shifted, [(100.0, 100.0)])
    u, v, ok = out[0]
    assert ok
    assert abs(u - 108.0) < 0.3 and abs(v - 105.0) < 0.3


# -- 2D Kalman -------------------------------------------------------------

def test_kalman_constant_velocity_prediction():
    st = kalman2d_init((0.0, 0.0))
    st.x[2] = 2.0       # 2 px/frame along u
    st = kalman2d_predict(st, 1.0)
    assert np.isclose(st.x[0], 2.0)


def test_kalman_huge_measurement_noise_ignores_measurement():
    st = kalman2d_init((10.0, 10.0))
    pred = kalman2d_predict(st, 1.0)
    pred.sigma_meas = 1e9       # gain -> 0
    cor = kalman2d_correct(pred, (500.0, 500.0))
    assert np.allclose(cor.x[:2], pred.x[:2], atol=1e-3)


def test_kalman_converges_to_constant_measurement():
    st = kalman2d_init((0.0, 0.0))
    for _ in range(100):
        st = kalman2d_predict(st, 1.0)
        st = kalman2d_correct(st, (37.0, 21.0))
    assert abs(st.x[0] - 37.0) < 1e-6
    assert abs(st.x[1] - 21.0) < 1e-6


# -- 2D correction and fusion ----------------------------------------------

def mk(name, u, v, vis=Visibility.PREDICTED, src=Source.FUSED_PREDICTION):
    return TrackedMarker(name, (u, v), vis, src)


def test_correct2d_snaps_inside_gate():
    out = correct_2d([mk("a", 50.0, 50.0)], [Blob((53.0, 54.0), 50, 1, 1)])
    assert out[0].visibility == Visibility.VISIBLE
    assert out[0].pixel == (53.0, 54.0)
    assert out[0].source == Source.BLOB_SNAP


def test_correct2d_keeps_prediction_outside_gate():
    out = correct_2d([mk("a", 50.0, 50.0)], [Blob((70.0, 70.0), 50, 1, 1)])
    assert out[0].visibility == Visibility.PREDICTED
    assert out[0].pixel == (50.0, 50.0)


def test_correct2d_blob_goes_to_closer_prediction():
    preds = [mk("a", 50.0, 50.0), mk("b", 54.0, 50.0)]
    out = correct_2d(preds, [Blob((51.0, 50.0), 50, 1, 1)])
    assert out[0].visibility == Visibility.VISIBLE
    assert out[1].visibility == Visibility.PREDICTED

    # brute force over all assignments confirms the greedy choice
    blob = (51.0, 50.0)
    dists = [abs(p.pixel[0] - blob[0]) for p in preds]
    assert np.argmin(dists) == 0


def test_correct2d_tie_broken_by_marker_order():
    preds = [mk("a", 48.0, 50.0), mk("b", 52.0, 50.0)]
    out = correct_2d(preds, [Blob((50.0, 50.0), 50, 1, 1)])
    assert out[0].visibility == Visibility.VISIBLE
    assert out[1].visibility == Visibility.PREDICTED


def test_fuse_both_visible_averages():
    f = mk("a", 10.0, 10.0, Visibility.VISIBLE, Source.BLOB_SNAP)
    k = mk("a", 12.0, 10.0, Visibility.VISIBLE, Source.BLOB_SNAP)
    out = fuse_predictions([f], [k])[0]
    assert out.pixel == (11.0, 10.0)
    assert out.visibility == Visibility.VISIBLE
    assert out.source == Source.FUSED_PREDICTION


def test_fuse_single_source():
    f = mk("a", 10.0, 10.0, Visibility.VISIBLE, Source.BLOB_SNAP)
    k = mk("a", 12.0, 10.0)
    out = fuse_predictions([f], [k])[0]
    assert out.pixel == (10.0, 10.0)
    assert out.source == Source.FLOW_ONLY


def test_fuse_neither_is_lost():
    f = mk("a", 5.0, 5.0)
    k = mk("a", 5.0, 5.0)
    out = fuse_predictions([f], [k])[0]
    assert out.pixel == (5.0, 5.0)
    assert out.visibility == Visibility.LOST


# -- closed-loop tracking on a rendered scene ------------------------------

LAYOUT = {
    "STER": (0.00, 0.00), "XIPH": (0.00, 0.08), "C7": (0.02, -0.05),
    "T10": (0.02, 0.10),
    "CLAV": (0.08, -0.02), "ACRO": (0.15, -0.04), "SCAP": (0.18, 0.02),
    "ARM1": (0.22, 0.05), "ARM2": (0.24, 0.12), "ELB": (0.26, 0.18),
    "FARM1": (0.28, 0.24), "FARM2": (0.30, 0.30), "WRIST": (0.32, 0.36),
}


def marker_world(t):
    dx = 0.02 * np.sin(2 * np.pi * 1.0 * t)
    dy = 0.01 * (1 - np.cos(2 * np.pi * 1.0 * t))
    return {n: np.array([x + dx, y + dy, 1.0]) for n, (x, y) in LAYOUT.items()}


def render(positions, skip=()):
    gray = np.zeros((480, 848), dtype=np.uint8)
    depth = np.full((480, 848), 1000, dtype=np.uint16)
    for n, p in positions.items():
        if n in skip:
            continue
        u, v = project(INTR, p)
        ui, vi = int(round(u)), int(round(v))
        gray[vi - 4:vi + 5, ui - 4:ui + 5] = 255
    return gray, depth


def tracker_setup():
    fp = FilterParams()
    crit = BlobCriteria(min_area=20, max_area=500)
    areas = [
        AreaConfig("thorax", (370, 170, 130, 160), fp, crit,
                   ["STER", "XIPH", "C7", "T10"]),
        AreaConfig("shoulder", (420, 180, 130, 120), fp, crit,
                   ["CLAV", "ACRO", "SCAP"]),
        AreaConfig("arm", (470, 220, 160, 220), fp, crit,
                   ["ARM1", "ARM2", "ELB", "FARM1", "FARM2", "WRIST"]),
    ]
    pos0 = marker_world(0.0)
    gray, depth = render(pos0)
    first = RgbdFrame(gray, depth, 0, 0.0)
    labels = {n: project(INTR, p) for n, p in pos0.items()}
    return areas, first, labels


def run_tracker(n_frames=40, skip_frames=None, skip_marker=None):
    areas, first, labels = tracker_setup()
    tr = MarkerTracker(areas, INTR, labels, first)
    results = []
    for k in range(1, n_frames):
        t = k / 60.0
        skip = (skip_marker,) if skip_frames and k in skip_frames else ()
        gray, depth = render(marker_world(t), skip=skip)
        results.append(tr.step(RgbdFrame(gray, depth, k, t)))
    return tr, results


def test_closed_loop_tracks_translating_markers():
    tr, results = run_tracker()
    truth = marker_world(39 / 60.0)
    final = results[-1]
    errs = []
    for m in final:
        err = np.linalg.norm(m.cam3d - truth[m.name])
        errs.append(err)
        # rendering quantizes squares to whole pixels (~1.2 mm at 1 m), so
        # allow a few pixel-footprints of slack per marker
        assert err < 0.008, (m.name, err)
        assert m.visibility == Visibility.VISIBLE
    assert np.sqrt(np.mean(np.square(errs))) < 0.005


def test_dropout_marker_coasts_on_kalman_then_recovers():
    skip = set(range(10, 15))
    tr, results = run_tracker(skip_frames=skip, skip_marker="WRIST")
    by_name = [{m.name: m for m in r} for r in results]
    for k in skip:
        m = by_name[k - 1]["WRIST"]
        assert m.visibility == Visibility.PREDICTED
        assert m.source == Source.KALMAN_ONLY
        # short gaps coast on the constant-velocity track, which stays
        # within a few millimetres of the true motion
        truth = marker_world(k / 60.0)
        assert np.linalg.norm(m.cam3d - truth["WRIST"]) < 0.01
    m = by_name[15 - 1]["WRIST"]
    assert m.visibility == Visibility.VISIBLE
    truth = marker_world(15 / 60.0)
    assert np.linalg.norm(m.cam3d - truth["WRIST"]) < 0.01


def test_long_dropout_falls_back_on_model():
    skip = set(range(5, 39))
    tr, results = run_tracker(skip_frames=skip, skip_marker="WRIST")
    by_name = [{m.name: m for m in r} for r in results]
    horizon = TrackerConfig().coast_with_kalman_frames
    for k in sorted(skip):
        m = by_name[k - 1]["WRIST"]
        assert m.visibility == Visibility.PREDICTED
        missed_before = k - 5
        if missed_before < horizon:
            assert m.source == Source.KALMAN_ONLY
        else:
            assert m.source == Source.MODEL_REPROJECTION


def test_all_blobs_deleted_marks_all_predicted():
    areas, first, labels = tracker_setup()
    tr = MarkerTracker(areas, INTR, labels, first)
    gray = np.zeros((480, 848), dtype=np.uint8)
    depth = np.full((480, 848), 1000, dtype=np.uint16)
    out = tr.step(RgbdFrame(gray, depth, 1, 1 / 60.0))
    pos0 = marker_world(0.0)
    for m in out:
        assert m.visibility == Visibility.PREDICTED
        assert m.source == Source.KALMAN_ONLY
        # one frame in, the coasted estimate is still next to the start pose
        assert np.linalg.norm(m.cam3d - pos0[m.name]) < 0.01


def test_deterministic_repeat():
    _, r1 = run_tracker(20)
    _, r2 = run_tracker(20)
    for a, b in zip(r1, r2):
        for ma, mb in zip(a, b):
            assert ma.pixel == mb.pixel
            assert ma.visibility == mb.visibility
            assert np.array_equal(ma.cam3d, mb.cam3d)


def test_build_tracking_model_reproduces_layout():
    pos = {n: np.array([x, y, 1.0]) for n, (x, y) in LAYOUT.items()}
    m = build_tracking_model(pos)
    assert m.ndof == 15      # free root + three ball joints
    from depthmocap.ekf import solve_ik
    target = np.stack([pos[n] for n in m.marker_names])
    q = solve_ik(m, target)
    _, got = m.forward_kinematics(q)
    assert np.max(np.abs(got - target)) < 1e-6
