"""HTTP API backing the first-frame labeling UI.

Serves the frames of a recorded sequence, runs the per-area preprocessing
and blob detection on demand so filter parameters can be tuned interactively,
collects the manual marker labels, and finally commits the tracking
initialization file. Label and parameter state is process-local and guarded
by a single lock.
"""
from __future__ import annotations

import json
import threading
from functools import lru_cache

import cv2
import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import formats
from .camera import CameraError, preprocess, RgbdFrame
from .tracking import (area_config_from_dict, area_config_to_dict,
                       blob_criteria_from_dict, detect_blobs)


def _png(img: np.ndarray) -> Response:
    ok, buf = cv2.imencode(".png", img)
    if not ok:
        raise RuntimeError("PNG encoding failed")
    return Response(content=buf.tobytes(), media_type="image/png")


def create_app(manifest_path: str, init_template: str,
               init_out: str) -> FastAPI:
    """App factory.

    manifest_path: frame sequence to serve; init_template: area definitions
    (ROIs, marker names, starting parameters) — its labels, if any, are
    ignored; init_out: where POST /api/init/commit writes the new init file.
    """
    import os

    intr, fps, records = formats.read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    area_dicts, _ = formats.read_init_file(init_template)
    state = {
        "areas": [area_config_from_dict(d) for d in area_dicts],
        "params_bytes": json.dumps(area_dicts, indent=1).encode(),
        "labels": {},
    }
    lock = threading.Lock()
    marker_names = [n for a in state["areas"] for n in a.marker_names]

    @lru_cache(maxsize=16)
    def load_frame(i: int) -> RgbdFrame:
        return formats.load_frame(base, records[i])

    def frame_or_404(i: int):
        if not 0 <= i < len(records):
            return None
        return load_frame(i)

    app = FastAPI(title="depthmocap labeling API")

    @app.get("/api/meta")
    def meta():
        return {
            "frames": len(records),
            "fps": fps,
            "width": intr.width,
            "height": intr.height,
            "intrinsics": {"fx": intr.fx, "fy": intr.fy,
                           "cx": intr.cx, "cy": intr.cy},
            "areas": [area_config_to_dict(a) for a in state["areas"]],
            "markerNames": marker_names,
        }

    @app.get("/api/frame/{i}/gray")
    def gray(i: int):
        frame = frame_or_404(i)
        if frame is None:
            return JSONResponse({"error": f"unknown frame {i}"},
                                status_code=404)
        return _png(frame.gray)

    @app.get("/api/frame/{i}/preprocessed")
    def preprocessed(i: int, area: str):
        frame = frame_or_404(i)
        if frame is None:
            return JSONResponse({"error": f"unknown frame {i}"},
                                status_code=404)
        with lock:
            match = [a for a in state["areas"] if a.name == area]
        if not match:
            return JSONResponse({"error": f"unknown area {area!r}"},
                                status_code=422)
        a = match[0]
        u0, v0, w, h = a.roi
        sub = RgbdFrame(frame.gray[v0:v0 + h, u0:u0 + w],
                        frame.depth[v0:v0 + h, u0:u0 + w],
                        frame.frame_number, frame.timestamp)
        # processed ROI composited on black at its image position, so UI
        # overlays share the gray frame's pixel coordinates
        out = np.zeros_like(frame.gray)
        out[v0:v0 + h, u0:u0 + w] = preprocess(sub, a.filter_params)
        return _png(out)

    @app.post("/api/detect")
    async def detect(request: Request):
        body = await request.json()
        frame = frame_or_404(int(body.get("frame", 0)))
        if frame is None:
            return JSONResponse({"error": "unknown frame"}, status_code=404)
        with lock:
            match = [a for a in state["areas"]
                     if a.name == body.get("area")]
        if not match:
            return JSONResponse(
                {"error": f"unknown area {body.get('area')!r}"},
                status_code=422)
        a = match[0]
        try:
            fp = formats.filter_params_from_dict(
                body.get("filterParams", {}))
            bc = blob_criteria_from_dict(body.get("blobCriteria", {}))
        except (CameraError, ValueError, TypeError) as e:
            return JSONResponse({"error": str(e)}, status_code=422)
        u0, v0, w, h = a.roi
        sub = RgbdFrame(frame.gray[v0:v0 + h, u0:u0 + w],
                        frame.depth[v0:v0 + h, u0:u0 + w],
                        frame.frame_number, frame.timestamp)
        binary = preprocess(sub, fp)
        blobs = detect_blobs(binary, bc)
        return {"blobs": [{"u": b.centroid[0] + u0, "v": b.centroid[1] + v0,
                           "area": b.area, "circularity": b.circularity,
                           "convexity": b.convexity} for b in blobs]}

    @app.get("/api/params")
    def get_params():
        with lock:
            return Response(content=state["params_bytes"],
                            media_type="application/json")

    @app.put("/api/params")
    async def put_params(request: Request):
        raw = await request.body()
        try:
            doc = json.loads(raw)
            areas = [area_config_from_dict(d) for d in doc]
        except (KeyError, TypeError, ValueError, CameraError) as e:
            return JSONResponse({"error": f"invalid params: {e}"},
                                status_code=422)
        names = [n for a in areas for n in a.marker_names]
        if names != marker_names:
            return JSONResponse(
                {"error": "params must keep the configured marker set"},
                status_code=422)
        with lock:
            state["areas"] = areas
            # stored verbatim so GET round-trips byte-identically
            state["params_bytes"] = raw
        return {"areas": len(areas)}

    @app.put("/api/labels")
    async def put_labels(request: Request):
        doc = await request.json()
        if not isinstance(doc, dict):
            return JSONResponse({"error": "labels must be an object"},
                                status_code=422)
        labels = {}
        for name, px in doc.items():
            if name not in marker_names:
                return JSONResponse({"error": f"unknown marker {name!r}"},
                                    status_code=422)
            try:
                u, v = float(px[0]), float(px[1])
            except (TypeError, ValueError, IndexError):
                return JSONResponse(
                    {"error": f"label for {name!r} must be [u, v]"},
                    status_code=422)
            if not (0 <= u < intr.width and 0 <= v < intr.height):
                return JSONResponse(
                    {"error": f"label for {name!r} outside image"},
                    status_code=422)
            labels[name] = (u, v)
        with lock:
            state["labels"] = labels
        return {"labeled": sorted(labels),
                "remaining": [n for n in marker_names if n not in labels]}

    @app.get("/api/labels")
    def get_labels():
        with lock:
            return {"labels": {k: list(v)
                               for k, v in state["labels"].items()},
                    "remaining": [n for n in marker_names
                                  if n not in state["labels"]]}

    @app.post("/api/init/commit")
    def commit():
        with lock:
            labels = dict(state["labels"])
            areas = list(state["areas"])
        missing = [n for n in marker_names if n not in labels]
        if missing:
            return JSONResponse(
                {"error": "unlabeled markers", "missing": missing},
                status_code=422)
        formats.write_init_file(init_out,
                                [area_config_to_dict(a) for a in areas],
                                labels)
        return {"path": init_out, "markers": len(labels)}

    return app
