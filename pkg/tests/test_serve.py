import json
import os

import numpy as np
import pytest
from fastapi.testclient import TestClient

from depthmocap.formats import read_init_file
from depthmocap.model import load_bundled
from depthmocap.serve import create_app
from depthmocap.synth import ScenarioConfig, write_dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    ds = tmp_path_factory.mktemp("serve_ds")
    model = load_bundled("biomech10").with_root_locked()
    write_dataset(ds, model, ScenarioConfig(duration_s=0.5, seed=2))
    return str(ds)


@pytest.fixture()
def client(dataset, tmp_path):
    app = create_app(os.path.join(dataset, "manifest.json"),
                     os.path.join(dataset, "init.json"),
                     str(tmp_path / "committed_init.json"))
    return TestClient(app)


def test_meta_summarizes_sequence(client):
    m = client.get("/api/meta").json()
    assert m["frames"] == 31                  # 0.5 s at 60 Hz, inclusive
    assert m["fps"] == 60.0
    assert len(m["markerNames"]) == 13
    assert {a["name"] for a in m["areas"]} == {"thorax", "shoulder", "arm"}


def test_gray_frame_is_png(client):
    r = client.get("/api/frame/0/gray")
    assert r.status_code == 200
    assert r.headers["content-type"] == "image/png"
    assert r.content[:8] == b"\x89PNG\r\n\x1a\n"


def test_unknown_frame_is_404(client):
    assert client.get("/api/frame/999/gray").status_code == 404
    assert client.get("/api/frame/999/preprocessed",
                      params={"area": "thorax"}).status_code == 404


def test_preprocessed_requires_known_area(client):
    r = client.get("/api/frame/0/preprocessed", params={"area": "thorax"})
    assert r.status_code == 200
    assert r.content[:8] == b"\x89PNG\r\n\x1a\n"
    assert client.get("/api/frame/0/preprocessed",
                      params={"area": "nope"}).status_code == 422


def test_detect_finds_all_rendered_markers(client):
    # area ROIs overlap, so count distinct blob centroids across areas
    meta = client.get("/api/meta").json()
    seen = []
    for a in meta["areas"]:
        r = client.post("/api/detect",
                        json={"area": a["name"],
                              "filterParams": a["filterParams"],
                              "blobCriteria": a["blobCriteria"]})
        assert r.status_code == 200
        for b in r.json()["blobs"]:
            p = np.array([b["u"], b["v"]])
            if not any(np.linalg.norm(p - q) < 2.0 for q in seen):
                seen.append(p)
    assert len(seen) == 13


def test_detect_rejects_bad_params(client):
    r = client.post("/api/detect",
                    json={"area": "thorax",
                          "filterParams": {"blurKernel": 4}})
    assert r.status_code == 422
    r = client.post("/api/detect",
                    json={"area": "thorax",
                          "blobCriteria": {"minArea": -1.0}})
    assert r.status_code == 422


def test_params_round_trip_byte_identical(client):
    areas = client.get("/api/meta").json()["areas"]
    areas[0]["filterParams"]["binaryThreshold"] = 142
    raw = json.dumps(areas, indent=3).encode()   # deliberately odd formatting
    assert client.put("/api/params", content=raw).status_code == 200
    got = client.get("/api/params")
    assert got.content == raw
    # and the parsed parameters took effect
    meta = client.get("/api/meta").json()
    assert meta["areas"][0]["filterParams"]["binaryThreshold"] == 142


def test_params_must_keep_marker_set(client):
    bad = [{"name": "only", "roi": [0, 0, 8, 8], "markerNames": ["STER"]}]
    r = client.put("/api/params", content=json.dumps(bad).encode())
    assert r.status_code == 422


def test_label_validation(client):
    assert client.put("/api/labels",
                      json={"NOPE": [1.0, 2.0]}).status_code == 422
    assert client.put("/api/labels",
                      json={"STER": [1e6, 2.0]}).status_code == 422
    assert client.put("/api/labels",
                      json={"STER": "not-a-pair"}).status_code == 422
    r = client.put("/api/labels", json={"STER": [10.0, 12.0]})
    assert r.status_code == 200
    assert "STER" not in r.json()["remaining"]


def test_commit_requires_all_markers(client, dataset, tmp_path):
    names = client.get("/api/meta").json()["markerNames"]
    r = client.post("/api/init/commit")
    assert r.status_code == 422
    assert sorted(r.json()["missing"]) == sorted(names)

    # labels straight from the generator make a valid committed init file
    _, labels = read_init_file(os.path.join(dataset, "init.json"))
    assert client.put("/api/labels",
                      json={k: list(v) for k, v in labels.items()}
                      ).status_code == 200
    r = client.post("/api/init/commit")
    assert r.status_code == 200
    areas, committed = read_init_file(r.json()["path"])
    assert {a["name"] for a in areas} == {"thorax", "shoulder", "arm"}
    assert committed == labels
