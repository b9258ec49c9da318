"""Inverse dynamics over the segment tree.

`inverse_dynamics` runs a recursive Newton-Euler pass over the compiled
elementary-joint chain: velocities and accelerations propagate root-to-leaf,
body forces accumulate leaf-to-root. `mass_matrix` takes the independent
body-Jacobian route (sum of J^T m J terms), which doubles as a cross-check of
the recursion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import KinematicModel, ModelError

GRAVITY = np.array([0.0, 0.0, -9.81])


def _cross(a, b):
    # single 3-vector cross product without np.cross's axis bookkeeping
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


@dataclass(frozen=True)
class ExternalForce:
    segment: str
    point_local: np.ndarray     # application point, segment frame (m)
    force: np.ndarray           # N, world frame
    moment: np.ndarray = None   # N*m, world frame

    def __post_init__(self):
        object.__setattr__(self, "point_local",
                           np.asarray(self.point_local, dtype=float))
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float))
        m = np.zeros(3) if self.moment is None else np.asarray(self.moment,
                                                               dtype=float)
        object.__setattr__(self, "moment", m)
        if not (np.all(np.isfinite(self.point_local))
                and np.all(np.isfinite(self.force))
                and np.all(np.isfinite(m))):
            raise ModelError("external force entries must be finite")


def _check_dims(model, *vecs):
    for v in vecs:
        if np.asarray(v).shape != (model.ndof,):
            raise ModelError(f"expected state of dim {model.ndof}")


def rnea(model: KinematicModel, q, qdot, qddot,
         gravity=GRAVITY, frames=None) -> np.ndarray:
    """Joint torques M(q) qddot + N(q, qdot) + G(q) via Newton-Euler recursion.

    frames optionally reuses a precomputed model._dof_frames(q) triple.
    """
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    qddot = np.asarray(qddot, dtype=float)
    _check_dims(model, q, qdot, qddot)
    T, axes, origins = model._dof_frames(q) if frames is None else frames
    n = model.ndof

    # frame origin after each dof (prismatic dofs slide the frame)
    g_pt = origins.copy()
    for d in range(n):
        if model.dofs[d].kind == "p":
            g_pt[d] = origins[d] + axes[d] * q[d]

    omega = np.zeros((n, 3))
    alpha = np.zeros((n, 3))
    vel = np.zeros((n, 3))      # of the material point at g_pt[d]
    acc = np.zeros((n, 3))
    for d in range(n):
        p = model.dof_parent[d]
        if p < 0:
            w_p = np.zeros(3)
            al_p = np.zeros(3)
            v_p = np.zeros(3)
            a_p = -np.asarray(gravity, dtype=float)   # gravity via base accel
            g_p = np.zeros(3)
        else:
            w_p, al_p, v_p, a_p, g_p = omega[p], alpha[p], vel[p], acc[p], g_pt[p]
        r = origins[d] - g_p
        v_o = v_p + _cross(w_p, r)
        a_o = a_p + _cross(al_p, r) + _cross(w_p, _cross(w_p, r))
        s = axes[d]
        if model.dofs[d].kind == "r":
            omega[d] = w_p + s * qdot[d]
            alpha[d] = al_p + s * qddot[d] + _cross(w_p, s) * qdot[d]
            vel[d] = v_o
            acc[d] = a_o
        else:
            omega[d] = w_p
            alpha[d] = al_p
            rs = s * q[d]
            vel[d] = v_o + _cross(w_p, rs) + s * qdot[d]
            acc[d] = (a_o + _cross(al_p, rs)
                      + _cross(w_p, _cross(w_p, rs))
                      + s * qddot[d] + 2.0 * _cross(w_p, s * qdot[d]))

    # body loads: net force and moment-about-world-origin per attach dof
    f_net = np.zeros((n, 3))
    n_net = np.zeros((n, 3))
    for i, seg in enumerate(model.segments):
        if seg.mass == 0.0 and not np.any(np.asarray(seg.inertia)):
            continue
        d = model.seg_attach_dof[i]
        if d < 0:
            continue            # body welded to ground takes no joint load
        R = T[i][:3, :3]
        com = T[i][:3, :3] @ np.asarray(seg.com, dtype=float) + T[i][:3, 3]
        rc = com - g_pt[d]
        a_c = acc[d] + _cross(alpha[d], rc) + _cross(
            omega[d], _cross(omega[d], rc))
        Iw = R @ np.asarray(seg.inertia, dtype=float) @ R.T
        F = seg.mass * a_c
        N = Iw @ alpha[d] + _cross(omega[d], Iw @ omega[d])
        f_net[d] += F
        n_net[d] += N + _cross(com, F)

    # backward pass: leaf-to-root force accumulation
    tau = np.zeros(n)
    for d in range(n - 1, -1, -1):
        s = axes[d]
        if model.dofs[d].kind == "r":
            tau[d] = s @ (n_net[d] - _cross(origins[d], f_net[d]))
        else:
            tau[d] = s @ f_net[d]
        p = model.dof_parent[d]
        if p >= 0:
            f_net[p] += f_net[d]
            n_net[p] += n_net[d]
    return tau


def mass_matrix(model: KinematicModel, q) -> np.ndarray:
    """Joint-space inertia matrix from body Jacobians: sum of
    m J_com^T J_com + J_w^T I J_w over segments."""
    q = np.asarray(q, dtype=float)
    _check_dims(model, q)
    M = np.zeros((model.ndof, model.ndof))
    Tseg, _ = model.forward_kinematics(q)
    for i, seg in enumerate(model.segments):
        if seg.mass == 0.0 and not np.any(np.asarray(seg.inertia)):
            continue
        J = model.point_jacobian(q, seg.name, seg.com)
        Jv, Jw = J[0:3], J[3:6]
        R = Tseg[seg.name][:3, :3]
        Iw = R @ np.asarray(seg.inertia, dtype=float) @ R.T
        M += seg.mass * Jv.T @ Jv + Jw.T @ Iw @ Jw
    return M


def nonlinear_effects(model: KinematicModel, q, qdot,
                      gravity=GRAVITY) -> np.ndarray:
    """N(q, qdot) + G(q)."""
    return rnea(model, q, qdot, np.zeros(model.ndof), gravity)


def external_torques(model: KinematicModel, q,
                     forces: list[ExternalForce],
                     frames=None) -> np.ndarray:
    """Generalized torques of external wrenches through the point Jacobian."""
    tau = np.zeros(model.ndof)
    for f in forces:
        J = model.point_jacobian(q, f.segment, f.point_local, frames=frames)
        tau += J[0:3].T @ f.force + J[3:6].T @ f.moment
    return tau


def inverse_dynamics(model: KinematicModel, q, qdot, qddot,
                     external_forces: list[ExternalForce] = (),
                     gravity=GRAVITY) -> np.ndarray:
    """tau = M(q) qddot + N(q, qdot) + G(q) + C^T(q) F_ext."""
    frames = model._dof_frames(np.asarray(q, dtype=float))
    tau = rnea(model, q, qdot, qddot, gravity, frames=frames)
    if external_forces:
        tau = tau + external_torques(model, q, list(external_forces), frames)
    return tau
