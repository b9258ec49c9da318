import numpy as np

from depthmocap.camera import Intrinsics
from depthmocap.formats import (
    read_init_file, read_manifest, read_pgm, read_series_csv,
    read_tracked_csv, write_init_file, write_manifest, write_pgm,
    write_series_csv, write_tracked_csv,
)


def test_pgm_8bit_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (48, 64)).astype(np.uint8)
    p = tmp_path / "g.pgm"
    write_pgm(p, img)
    assert np.array_equal(read_pgm(p), img)


def test_pgm_16bit_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 65536, (48, 64)).astype(np.uint16)
    p = tmp_path / "d.pgm"
    write_pgm(p, img)
    out = read_pgm(p)
    assert out.dtype == np.uint16
    assert np.array_equal(out, img)


def test_manifest_round_trip(tmp_path):
    intr = Intrinsics(420, 421, 424, 240, 848, 480)
    recs = [{"index": 0, "frameNumber": 3, "timestamp": 0.05,
             "grayPath": "g0.pgm", "depthPath": "d0.pgm"}]
    p = tmp_path / "seq.json"
    write_manifest(p, intr, 60, recs)
    intr2, fps, recs2 = read_manifest(p)
    assert intr2 == intr and fps == 60 and recs2 == recs


def test_init_file_round_trip(tmp_path):
    areas = [{"name": "arm", "roi": [0, 0, 100, 100],
              "filterParams": {"blurKernel": 5},
              "blobCriteria": {"minArea": 10},
              "markerNames": ["A", "B"]}]
    labels = {"A": (10.5, 20.25), "B": (30.0, 40.0)}
    p = tmp_path / "init.json"
    write_init_file(p, areas, labels)
    a2, l2 = read_init_file(p)
    assert a2 == areas and l2 == labels


def test_tracked_csv_round_trip(tmp_path):
    rows = [
        {"frameNumber": 0, "timestamp": 0.0, "markers": {
            "A": (10.5, 20.5, (0.1, 0.2, 0.9), "Visible"),
            "B": (30.0, 40.0, None, "Predicted")}},
        {"frameNumber": 2, "timestamp": 1 / 30, "markers": {
            "A": (11.0, 21.0, (0.11, 0.21, 0.91), "Visible"),
            "B": (31.0, 41.0, (0.3, 0.4, 0.8), "Visible")}},
    ]
    p = tmp_path / "t.csv"
    write_tracked_csv(p, ["A", "B"], rows)
    names, fn, ts, px, pos, vis = read_tracked_csv(p)
    assert names == ["A", "B"]
    assert list(fn) == [0, 2]
    assert np.allclose(px[0, 0], [10.5, 20.5])
    assert np.isnan(pos[0, 1]).all()
    assert vis[1, 1] == "Visible"
    assert np.allclose(pos[1, 0], [0.11, 0.21, 0.91])


def test_series_csv_round_trip(tmp_path):
    t = np.arange(5) / 100.0
    vals = np.random.default_rng(2).normal(size=(5, 3))
    p = tmp_path / "s.csv"
    write_series_csv(p, ["x", "y", "z"], t, vals)
    header, t2, v2 = read_series_csv(p)
    assert header == ["x", "y", "z"]
    assert np.array_equal(t2, t)
    assert np.array_equal(v2, vals)
