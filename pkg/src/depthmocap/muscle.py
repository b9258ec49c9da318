"""Rigid-tendon Hill-type muscle model and moment arms.

Curve forms (documented here so they can be re-derived independently):

    active force-length   f_act(l) = exp(-(l - 1)^2 / 0.45)
    passive force-length  f_pas(l) = 0                          for l <= 1
                                   = (exp(4 (l - 1) / 0.6) - 1) / (exp(4) - 1)
    force-velocity        f_v(v)   = max(0, (1 + v) / (1 - v / 0.25))  v <= 0
                                   = (1 + 1.4 v / 0.08) / (1 + v / 0.08) v > 0

with l the fiber length normalized by the optimal fiber length and v the
fiber velocity normalized by 10 optimal fiber lengths per second (negative =
shortening). f_v is continuous and differentiable at v = 0 (slope 5 on both
sides), equals 1 at v = 0, vanishes at v = -1 and saturates at 1.4 for fast
lengthening.

Total force: f = f_iso_max (a f_act(l) f_v(v) + f_pas(l)) cos(pennation),
with fiber length (l_mt - tendon_slack) / cos(pennation) under the rigid
tendon assumption. A muscle shorter than its tendon slack length is slack and
produces zero force.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import KinematicModel, MuscleDef

VMAX_FIBER_LENGTHS_PER_S = 10.0
FV_ECC_PLATEAU = 1.4
_FV_ECC_B = 0.08
_FV_CON_C = 0.25


@dataclass
class MuscleState:
    norm_fiber_length: float
    norm_fiber_velocity: float
    activation: float
    force: float
    moment_arms: np.ndarray


def f_act(l: float) -> float:
    return float(np.exp(-((l - 1.0) ** 2) / 0.45))


def f_pas(l: float) -> float:
    if l <= 1.0:
        return 0.0
    return float((np.exp(4.0 * (l - 1.0) / 0.6) - 1.0) / (np.exp(4.0) - 1.0))


def f_v(v: float) -> float:
    if v <= 0.0:
        return float(max(0.0, (1.0 + v) / (1.0 - v / _FV_CON_C)))
    return float((1.0 + FV_ECC_PLATEAU * v / _FV_ECC_B) / (1.0 + v / _FV_ECC_B))


def _path_cache(model: KinematicModel):
    """Flattened via-point layout shared by every muscle-length query: world
    positions of all path points can then be computed with one matrix product
    per segment instead of one per point."""
    cache = getattr(model, "_muscle_path_cache", None)
    if cache is not None:
        return cache
    seg_points = {}          # segment -> (row indices, local points)
    pair_a, pair_b, starts = [], [], []
    row = 0
    for mus in model.muscles:
        starts.append(len(pair_a))
        rows = []
        for seg, p in mus.via_points:
            seg_points.setdefault(seg, ([], []))
            seg_points[seg][0].append(row)
            seg_points[seg][1].append(np.asarray(p, dtype=float))
            rows.append(row)
            row += 1
        pair_a.extend(rows[:-1])
        pair_b.extend(rows[1:])
    groups = [(seg, np.array(idx), np.array(pts))
              for seg, (idx, pts) in seg_points.items()]
    cache = (row, groups, np.array(pair_a), np.array(pair_b),
             np.array(starts))
    model._muscle_path_cache = cache
    return cache


def _via_dof_masks(model: KinematicModel, groups, n_pts: int, seg_index):
    """(n_pts, ndof) ancestor mask plus per-dof prismatic flags, cached (the
    muscle paths and kinematic structure are immutable)."""
    cached = getattr(model, "_via_mask_cache", None)
    if cached is None:
        mask = np.zeros((n_pts, model.ndof), dtype=bool)
        for seg, idx, _ in groups:
            mask[np.ix_(idx, model._ancestor_dofs(seg_index[seg]))] = True
        prismatic = np.array([d.kind == "p" for d in model.dofs])
        model._via_mask_cache = (mask, prismatic)
        cached = model._via_mask_cache
    return cached


def all_lengths(model: KinematicModel, T: dict) -> np.ndarray:
    """Musculotendon length of every muscle at the FK segment frames T."""
    n_pts, groups, pa, pb, starts = _path_cache(model)
    W = np.empty((n_pts, 3))
    for seg, idx, pts in groups:
        M = T[seg]
        W[idx] = pts @ M[:3, :3].T + M[:3, 3]
    d = np.linalg.norm(W[pb] - W[pa], axis=1)
    return np.add.reduceat(d, starts)


def musculotendon_length(model: KinematicModel, muscle: MuscleDef, q) -> float:
    """Polyline length over the muscle's via points at FK(q)."""
    T, _ = model.forward_kinematics(q)
    i = [m.name for m in model.muscles].index(muscle.name)
    return float(all_lengths(model, T)[i])


def _moment_arms_and_lengths(model: KinematicModel, q):
    """(moment arms (n_muscles, ndof), musculotendon lengths) in one FK pass.

    Analytic: the length gradient is the path unit vectors contracted with the
    geometric Jacobians of the via points. moment_arms_fd is the
    finite-difference cross-check.
    """
    q = np.asarray(q, dtype=float)
    n_pts, groups, pa, pb, starts = _path_cache(model)
    T, axes, origins = model._dof_frames(q)
    seg_index = {s.name: i for i, s in enumerate(model.segments)}
    W = np.empty((n_pts, 3))
    for seg, idx, pts in groups:
        M = T[seg_index[seg]]
        W[idx] = pts @ M[:3, :3].T + M[:3, 3]
    mask, prismatic = _via_dof_masks(model, groups, n_pts, seg_index)
    # revolute columns: axis x (point - origin); prismatic: the axis; one
    # vectorized cross over all (point, dof) pairs
    Jr = np.cross(axes[None, :, :], W[:, None, :] - origins[None, :, :])
    Jp = np.broadcast_to(axes[None, :, :], Jr.shape)
    Jm = np.where(prismatic[None, :, None], Jp, Jr)
    Jm = Jm * mask[:, :, None]
    J = Jm.transpose(0, 2, 1)                 # (n_pts, 3, ndof)
    dvec = W[pb] - W[pa]
    length = np.linalg.norm(dvec, axis=1)
    u = dvec / np.where(length > 0, length, 1.0)[:, None]
    contrib = np.einsum('pi,pid->pd', u, J[pb] - J[pa])
    G = -np.add.reduceat(contrib, starts, axis=0)
    lmt = np.add.reduceat(length, starts)
    return G, lmt


def moment_arms_all(model: KinematicModel, q) -> np.ndarray:
    """(n_muscles, ndof) moment arms, -d(l_mt)/dq."""
    return _moment_arms_and_lengths(model, q)[0]


def moment_arms_fd(model: KinematicModel, q, h: float = 1e-6) -> np.ndarray:
    """Finite-difference moment arms (oracle for the analytic version)."""
    q = np.asarray(q, dtype=float)
    G = np.empty((len(model.muscles), model.ndof))
    for j in range(model.ndof):
        qp, qm = q.copy(), q.copy()
        qp[j] += h
        qm[j] -= h
        Tp, _ = model.forward_kinematics(qp)
        Tm, _ = model.forward_kinematics(qm)
        G[:, j] = -(all_lengths(model, Tp) - all_lengths(model, Tm)) \
            / (2.0 * h)
    return G


def moment_arms(model: KinematicModel, muscle: MuscleDef, q) -> np.ndarray:
    i = [m.name for m in model.muscles].index(muscle.name)
    return moment_arms_all(model, q)[i]


def muscle_kinematics(model: KinematicModel, muscle: MuscleDef, q, qdot,
                      gamma: np.ndarray = None):
    """(l_mt, v_mt, norm fiber length, norm fiber velocity) at a state."""
    lmt = musculotendon_length(model, muscle, q)
    if gamma is None:
        gamma = moment_arms(model, muscle, q)
    v_mt = float(-gamma @ np.asarray(qdot, dtype=float))
    cosa = np.cos(muscle.pennation)
    lf = (lmt - muscle.tendon_slack_length) / cosa
    l_norm = lf / muscle.optimal_fiber_length
    v_norm = (v_mt / cosa) / (muscle.optimal_fiber_length
                              * VMAX_FIBER_LENGTHS_PER_S)
    return lmt, v_mt, l_norm, v_norm


def _param_cache(model: KinematicModel):
    cache = getattr(model, "_muscle_param_cache", None)
    if cache is None:
        cache = {
            "slack": np.array([m.tendon_slack_length for m in model.muscles]),
            "opt": np.array([m.optimal_fiber_length for m in model.muscles]),
            "cosa": np.cos([m.pennation for m in model.muscles]),
            "fmax": np.array([m.f_iso_max for m in model.muscles]),
        }
        model._muscle_param_cache = cache
    return cache


def all_muscle_kinematics(model: KinematicModel, q, qdot,
                          gamma_all: np.ndarray | None = None,
                          lmt: np.ndarray | None = None):
    """Vectorized (l_mt, v_mt, norm fiber length, norm fiber velocity)
    arrays over every muscle."""
    if gamma_all is None or lmt is None:
        gamma_fk, lmt_fk = _moment_arms_and_lengths(model, q)
        gamma_all = gamma_fk if gamma_all is None else gamma_all
        lmt = lmt_fk if lmt is None else lmt
    v_mt = -(gamma_all @ np.asarray(qdot, dtype=float))
    p = _param_cache(model)
    l_norm = (lmt - p["slack"]) / p["cosa"] / p["opt"]
    v_norm = (v_mt / p["cosa"]) / (p["opt"] * VMAX_FIBER_LENGTHS_PER_S)
    return lmt, v_mt, l_norm, v_norm


def _f_act_arr(l):
    return np.exp(-((l - 1.0) ** 2) / 0.45)


def _f_pas_arr(l):
    return np.where(l <= 1.0, 0.0,
                    (np.exp(4.0 * np.maximum(l - 1.0, 0.0) / 0.6) - 1.0)
                    / (np.exp(4.0) - 1.0))


def _f_v_arr(v):
    with np.errstate(divide="ignore", invalid="ignore"):
        con = np.maximum(0.0, (1.0 + v) / (1.0 - v / _FV_CON_C))
        ecc = (1.0 + FV_ECC_PLATEAU * v / _FV_ECC_B) / (1.0 + v / _FV_ECC_B)
    return np.where(v <= 0.0, con, ecc)


def activation_affine_force_terms(model: KinematicModel, q, qdot,
                                  gamma_all: np.ndarray | None = None,
                                  lmt: np.ndarray | None = None):
    """Per-muscle (gain, passive) of the rigid-tendon force at fixed
    kinematics: force_i = gain_i * a_i + passive_i; slack muscles get zeros."""
    lmt, _, l_norm, v_norm = all_muscle_kinematics(model, q, qdot, gamma_all,
                                                   lmt)
    p = _param_cache(model)
    taut = lmt > p["slack"]
    gain = np.where(taut, p["fmax"] * _f_act_arr(l_norm) * _f_v_arr(v_norm)
                    * p["cosa"], 0.0)
    passive = np.where(taut, p["fmax"] * _f_pas_arr(l_norm) * p["cosa"], 0.0)
    return gain, passive


def muscle_force(model: KinematicModel, muscle: MuscleDef, q, qdot,
                 activation: float) -> tuple[float, MuscleState]:
    if not (0.0 <= activation <= 1.0):
        raise ValueError("activation must be in [0, 1]")
    gamma = moment_arms(model, muscle, q)
    lmt, _, l_norm, v_norm = muscle_kinematics(model, muscle, q, qdot, gamma)
    if lmt <= muscle.tendon_slack_length:
        force = 0.0    # slack muscle
        l_norm = max(l_norm, 0.0)
    else:
        cosa = np.cos(muscle.pennation)
        force = muscle.f_iso_max * (
            activation * f_act(l_norm) * f_v(v_norm) + f_pas(l_norm)) * cosa
    return force, MuscleState(l_norm, v_norm, activation, force, gamma)
