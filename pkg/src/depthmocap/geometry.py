"""Small rotation / rigid-transform helpers shared across modules."""
from __future__ import annotations

import numpy as np


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def euler_xyz(a: float, b: float, c: float) -> np.ndarray:
    """Intrinsic XYZ rotation: Rx(a) @ Ry(b) @ Rz(c)."""
    return rot_x(a) @ rot_y(b) @ rot_z(c)


def axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis (closed forms for the principal
    axes, the common case in compiled joint chains)."""
    axis = np.asarray(axis, dtype=float)
    x, y, z = axis
    if x == 1.0 and y == 0.0 and z == 0.0:
        return rot_x(angle)
    if x == 0.0 and y == 1.0 and z == 0.0:
        return rot_y(angle)
    if x == 0.0 and y == 0.0 and z == 1.0:
        return rot_z(angle)
    k = axis / np.linalg.norm(axis)
    K = skew(k)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])


def make_transform(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def transform_point(T: np.ndarray, p: np.ndarray) -> np.ndarray:
    return T[:3, :3] @ np.asarray(p, dtype=float) + T[:3, 3]
