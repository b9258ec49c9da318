"""Pinhole camera model, depth handling and image preprocessing.

The preprocessing chain mirrors the per-area marker enhancement used before
blob detection: depth-based background removal, box blur, contrast-limited
adaptive histogram equalization (CLAHE), then a binary threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np


class CameraError(ValueError):
    pass


class InvalidDepthError(CameraError):
    pass


class BehindCameraError(CameraError):
    pass


class MissingDepthError(CameraError):
    """All depth samples in the lookup neighborhood are invalid."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError("principal point outside image")


@dataclass
class RgbdFrame:
    gray: np.ndarray          # (h, w) uint8
    depth: np.ndarray         # (h, w) uint16, mm; 0 = invalid
    frame_number: int
    timestamp: float

    def __post_init__(self):
        if self.gray.shape != self.depth.shape:
            raise CameraError("gray and depth images must share dimensions")
        if self.gray.dtype != np.uint8 or self.depth.dtype != np.uint16:
            raise CameraError("gray must be uint8, depth uint16")


@dataclass(frozen=True)
class FilterParams:
    background_depth_max: float = 1500.0   # mm
    blur_kernel: int = 5
    clahe_clip_limit: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    binary_threshold: int = 150

    def __post_init__(self):
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise CameraError("blur kernel must be odd >= 1")
        if self.clahe_tiles[0] < 1 or self.clahe_tiles[1] < 1:
            raise CameraError("clahe tile grid must be >= (1, 1)")
        if not (0 <= self.binary_threshold <= 255):
            raise CameraError("binary threshold must be in [0, 255]")


def deproject(intr: Intrinsics, u: float, v: float, z_mm: float) -> np.ndarray:
    """Pixel + depth (mm) -> 3-vector in camera coordinates (m)."""
    if z_mm <= 0:
        raise InvalidDepthError(f"invalid depth {z_mm}")
    z = z_mm * 1e-3
    return np.array([(u - intr.cx) * z / intr.fx,
                     (v - intr.cy) * z / intr.fy,
                     z])


def project(intr: Intrinsics, point) -> tuple[float, float]:
    """Camera-space 3-vector (m) -> sub-pixel image coordinates."""
    x, y, z = np.asarray(point, dtype=float)
    if z <= 0:
        raise BehindCameraError(f"point behind camera, z={z}")
    return (intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy)


def depth_at(frame: RgbdFrame, u: float, v: float) -> float:
    """Median of the valid depths in the 3x3 neighborhood of (u, v), in mm."""
    h, w = frame.depth.shape
    ui, vi = int(round(u)), int(round(v))
    if not (0 <= ui < w and 0 <= vi < h):
        raise CameraError(f"pixel ({u}, {v}) outside image")
    patch = frame.depth[max(vi - 1, 0):vi + 2, max(ui - 1, 0):ui + 2]
    valid = np.sort(patch[patch > 0], axis=None)
    n = valid.size
    if n == 0:
        raise MissingDepthError(f"no valid depth around ({ui}, {vi})")
    if n % 2:
        return float(valid[n // 2])
    return 0.5 * (float(valid[n // 2 - 1]) + float(valid[n // 2]))


# -- CLAHE -----------------------------------------------------------------

def _clip_histogram(hist: np.ndarray, clip_limit: float, tile_pixels: int) -> np.ndarray:
    """Clip a 256-bin histogram and redistribute the excess uniformly."""
    limit = max(clip_limit * tile_pixels / 256.0, 1.0)
    clipped = np.minimum(hist, limit)
    excess = hist.sum() - clipped.sum()
    clipped = clipped + excess / 256.0
    return clipped


def _tile_luts(img: np.ndarray, tiles: tuple[int, int], clip_limit: float):
    rows, cols = tiles
    h, w = img.shape
    th, tw = int(np.ceil(h / rows)), int(np.ceil(w / cols))
    # pad with edge replication so every tile is full size
    padded = np.pad(img, ((0, rows * th - h), (0, cols * tw - w)), mode="edge")
    # all tile histograms in one bincount over (tile index, value) codes
    tiled = padded.reshape(rows, th, cols, tw).transpose(0, 2, 1, 3)
    codes = (np.arange(rows * cols, dtype=np.int64)[:, None] * 256
             + tiled.reshape(rows * cols, th * tw))
    hists = np.bincount(codes.ravel(), minlength=rows * cols * 256) \
        .reshape(rows * cols, 256).astype(np.float64)
    limit = max(clip_limit * th * tw / 256.0, 1.0)
    clipped = np.minimum(hists, limit)
    clipped += (hists.sum(axis=1) - clipped.sum(axis=1))[:, None] / 256.0
    cdf = np.cumsum(clipped, axis=1)
    cdf /= cdf[:, -1:]
    luts = np.clip(np.round(cdf * 255.0), 0, 255).reshape(rows, cols, 256)
    return luts, th, tw


_CLAHE_GRID_CACHE: dict = {}


def _clahe_grid(shape, tiles, th, tw):
    """Per-pixel tile indices and bilinear weights; depends only on geometry,
    so cache across frames."""
    key = (shape, tiles)
    hit = _CLAHE_GRID_CACHE.get(key)
    if hit is not None:
        return hit
    rows, cols = tiles
    h, w = shape
    fy = (np.arange(h)[:, None] + 0.5) / th - 0.5
    fx = (np.arange(w)[None, :] + 0.5) / tw - 0.5
    r0 = np.clip(np.floor(fy).astype(int), 0, rows - 1)
    c0 = np.clip(np.floor(fx).astype(int), 0, cols - 1)
    r1 = np.minimum(r0 + 1, rows - 1)
    c1 = np.minimum(c0 + 1, cols - 1)
    wy = np.clip(fy - r0, 0.0, 1.0)
    wx = np.clip(fx - c0, 0.0, 1.0)
    # per corner: offsets into the flattened (tile, value) LUT table and
    # bilinear weights, flattened so the per-frame work is four gathers
    def offs(r, c):
        idx = np.broadcast_to(r * cols + c, shape)
        return (idx.astype(np.int32) * 256).ravel()

    def wts(a):
        return np.broadcast_to(a.astype(np.float32), shape).ravel()

    hit = (offs(r0, c0), offs(r0, c1), offs(r1, c0), offs(r1, c1),
           wts((1 - wy) * (1 - wx)), wts((1 - wy) * wx),
           wts(wy * (1 - wx)), wts(wy * wx))
    if len(_CLAHE_GRID_CACHE) > 32:
        _CLAHE_GRID_CACHE.clear()
    _CLAHE_GRID_CACHE[key] = hit
    return hit


def clahe(img: np.ndarray, clip_limit: float = 2.0,
          tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization with bilinear blending
    between the per-tile mappings."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise CameraError("clahe expects a uint8 image")
    luts, th, tw = _tile_luts(img, tiles, clip_limit)
    flat = luts.reshape(-1).astype(np.float32)
    b00, b01, b10, b11, w00, w01, w10, w11 = \
        _clahe_grid(img.shape, tiles, th, tw)
    v = img.reshape(-1).astype(np.int32)
    out = w00 * flat[b00 + v]
    out += w01 * flat[b01 + v]
    out += w10 * flat[b10 + v]
    out += w11 * flat[b11 + v]
    return np.clip(np.round(out), 0, 255).astype(np.uint8).reshape(img.shape)


def preprocess(frame: RgbdFrame, params: FilterParams) -> np.ndarray:
    """Fixed chain: background removal -> box blur -> CLAHE -> binary threshold.

    Returns a {0, 255} uint8 image.
    """
    gray = frame.gray.copy()
    mask = (frame.depth == 0) | (frame.depth > params.background_depth_max)
    gray[mask] = 0
    if params.blur_kernel > 1:
        gray = cv2.blur(gray, (params.blur_kernel, params.blur_kernel))
    gray = clahe(gray, params.clahe_clip_limit, params.clahe_tiles)
    return np.where(gray > params.binary_threshold, 255, 0).astype(np.uint8)
