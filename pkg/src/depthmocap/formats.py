"""On-disk formats: PGM images, sequence manifests, tracked-marker CSV,
tracking init files, force/EMG CSV."""
from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .camera import FilterParams, Intrinsics, RgbdFrame


class FormatError(ValueError):
    pass


# -- PGM (P5) --------------------------------------------------------------

def write_pgm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.dtype == np.uint8:
        maxval = 255
        payload = img.tobytes()
    elif img.dtype == np.uint16:
        maxval = 65535
        payload = img.astype(">u2").tobytes()   # PGM 16-bit is big-endian
    else:
        raise FormatError(f"unsupported dtype {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(payload)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    raw = data[m.end():]
    if maxval == 255:
        img = np.frombuffer(raw, dtype=np.uint8, count=w * h)
    elif maxval == 65535:
        img = np.frombuffer(raw, dtype=">u2", count=w * h).astype(np.uint16)
    else:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    return img.reshape(h, w).copy()


# -- sequence manifest -----------------------------------------------------

def write_manifest(path, intr: Intrinsics, fps: float, records: list[dict]):
    """records: [{index, frameNumber, timestamp, grayPath, depthPath}, ...]"""
    doc = {
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx,
                       "cy": intr.cy, "width": intr.width, "height": intr.height},
        "fpsNominal": fps,
        "frames": records,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_manifest(path):
    doc = json.loads(Path(path).read_text())
    it = doc["intrinsics"]
    intr = Intrinsics(it["fx"], it["fy"], it["cx"], it["cy"],
                      it["width"], it["height"])
    return intr, doc["fpsNominal"], doc["frames"]


def load_frame(base_dir, record) -> RgbdFrame:
    base = Path(base_dir)
    return RgbdFrame(
        gray=read_pgm(base / record["grayPath"]),
        depth=read_pgm(base / record["depthPath"]),
        frame_number=record["frameNumber"],
        timestamp=record["timestamp"],
    )


# -- tracking init file ----------------------------------------------------

def write_init_file(path, area_configs: list[dict], labels: dict):
    """area_configs: [{name, roi, filterParams, blobCriteria, markerNames}];
    labels: marker name -> [u, v] on the first frame."""
    Path(path).write_text(json.dumps(
        {"areas": area_configs, "labels": {k: list(map(float, v))
                                           for k, v in labels.items()}},
        indent=1) + "\n")


def read_init_file(path):
    doc = json.loads(Path(path).read_text())
    return doc["areas"], {k: tuple(v) for k, v in doc["labels"].items()}


def filter_params_from_dict(d: dict) -> FilterParams:
    return FilterParams(
        background_depth_max=d.get("backgroundDepthMax", 1500.0),
        blur_kernel=d.get("blurKernel", 5),
        clahe_clip_limit=d.get("claheClipLimit", 2.0),
        clahe_tiles=tuple(d.get("claheTiles", (8, 8))),
        binary_threshold=d.get("binaryThreshold", 150),
    )


def filter_params_to_dict(p: FilterParams) -> dict:
    return {"backgroundDepthMax": p.background_depth_max,
            "blurKernel": p.blur_kernel,
            "claheClipLimit": p.clahe_clip_limit,
            "claheTiles": list(p.clahe_tiles),
            "binaryThreshold": p.binary_threshold}


# -- tracked marker CSV ----------------------------------------------------

def write_tracked_csv(path, marker_names: list[str], rows: list[dict]):
    """One row per frame: frameNumber, timestamp, then per marker
    u, v, X, Y, Z, visibility."""
    header = ["frameNumber", "timestamp"]
    for m in marker_names:
        header += [f"{m}_u", f"{m}_v", f"{m}_X", f"{m}_Y", f"{m}_Z",
                   f"{m}_vis"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            out = [row["frameNumber"], repr(float(row["timestamp"]))]
            for m in marker_names:
                u, v, xyz, vis = row["markers"][m]
                x, y, z = (("", "", "") if xyz is None
                           else (repr(float(xyz[0])), repr(float(xyz[1])),
                                 repr(float(xyz[2]))))
                out += [repr(float(u)), repr(float(v)), x, y, z, vis]
            w.writerow(out)


def read_tracked_csv(path):
    """Returns (marker_names, frame_numbers, timestamps, pixels (n,m,2),
    positions (n,m,3) with NaN where absent, visibility (n,m) strings)."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        names = [h[:-2] for h in header if h.endswith("_u")]
        fn, ts, px, pos, vis = [], [], [], [], []
        for row in r:
            fn.append(int(row[0]))
            ts.append(float(row[1]))
            pr, xr, vr = [], [], []
            for k in range(len(names)):
                base = 2 + 6 * k
                pr.append([float(row[base]), float(row[base + 1])])
                xyz = row[base + 2:base + 5]
                xr.append([float(x) if x else np.nan for x in xyz])
                vr.append(row[base + 5])
            px.append(pr)
            pos.append(xr)
            vis.append(vr)
    return (names, np.array(fn), np.array(ts), np.array(px), np.array(pos),
            np.array(vis, dtype=object))


# -- generic numeric CSV (forces, EMG, joint outputs) ----------------------

def write_series_csv(path, header: list[str], times: np.ndarray,
                     values: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + list(header))
        for t, row in zip(times, np.atleast_2d(values)):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])


def read_series_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)[1:]
        times, vals = [], []
        for row in r:
            times.append(float(row[0]))
            vals.append([float(x) for x in row[1:]])
    return header, np.array(times), np.array(vals)
