"""Extended Kalman filtering of joint coordinates from 3D marker positions.

The state stacks the generalized coordinates with one or two time
derivatives (``n_derivatives`` = 2 for tracking, 3 when joint accelerations
are needed downstream for inverse dynamics). The process model holds the
highest derivative constant over the frame interval with white noise driving
it; the measurement model is marker forward kinematics, linearized with the
geometric marker Jacobian. Covariance updates use the Joseph form.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import KinematicModel


class EkfError(RuntimeError):
    pass


@dataclass(frozen=True)
class EkfConfig:
    n_derivatives: int = 2
    process_noise_qddot: float = 50.0    # driving noise PSD on the top derivative
    measurement_noise: float = 0.005     # marker position sigma, meters
    initial_covariance: float = 1.0
    missing_marker_policy: str = "drop_rows"   # or "inflate_noise"
    inflation_factor: float = 1e6

    def __post_init__(self):
        if self.n_derivatives not in (2, 3):
            raise ValueError("n_derivatives must be 2 or 3")
        if self.missing_marker_policy not in ("drop_rows", "inflate_noise"):
            raise ValueError(f"unknown missing marker policy "
                             f"{self.missing_marker_policy!r}")


@dataclass
class EkfState:
    x: np.ndarray          # stacked (q, qdot[, qddot])
    P: np.ndarray
    ndof: int
    n_derivatives: int

    @property
    def q(self) -> np.ndarray:
        return self.x[:self.ndof]

    @property
    def qdot(self) -> np.ndarray:
        return self.x[self.ndof:2 * self.ndof]

    @property
    def qddot(self) -> np.ndarray:
        if self.n_derivatives < 3:
            return np.zeros(self.ndof)
        return self.x[2 * self.ndof:3 * self.ndof]


def _solve_ik_once(model, markers, valid, rows, q0, damping, tol, max_iter):
    q = np.array(q0, dtype=float)
    for _ in range(max_iter):
        _, pred = model.forward_kinematics(q)
        r = (markers - pred)[valid].ravel()
        rms = np.sqrt(np.mean(r ** 2))
        if rms < tol:
            return q, rms
        J = model.marker_jacobian(q)[rows]
        JtJ = J.T @ J + damping * np.eye(model.ndof)
        dq = np.linalg.solve(JtJ, J.T @ r)
        q = q + dq
        if np.max(np.abs(dq)) < 1e-12:
            break
    _, pred = model.forward_kinematics(q)
    r = (markers - pred)[valid].ravel()
    return q, np.sqrt(np.mean(r ** 2))


def solve_ik(model: KinematicModel, markers: np.ndarray,
             q0: np.ndarray | None = None, damping: float = 1e-4,
             tol: float = 1e-6, max_iter: int = 100,
             max_residual: float = 0.05, restarts: int = 8) -> np.ndarray:
    """Damped least-squares inverse kinematics.

    markers is (n_markers, 3); rows with any NaN are ignored. Stops when the
    RMS marker residual drops below tol (meters) or at a local best fit (the
    update stalls); measured markers never fit the model exactly, so a
    leftover residual up to max_residual is accepted.

    Weakly observable dofs (e.g. rotation about a near-collinear marker
    axis) create mirror-image local minima whose residual is only slightly
    worse than the true fit, and measurement noise can steer the descent
    into one. When no starting pose is given, the solve is repeated from a
    fixed set of perturbed starts and the lowest-residual solution wins.
    """
    markers = np.asarray(markers, dtype=float)
    valid = np.all(np.isfinite(markers), axis=1)
    if valid.sum() < 3:
        raise EkfError(f"inverse kinematics needs at least 3 valid markers, "
                       f"got {int(valid.sum())}")
    rows = np.repeat(valid, 3)
    if q0 is not None:
        starts = [np.array(q0, dtype=float)]
    else:
        rng = np.random.default_rng(0)
        starts = [np.zeros(model.ndof)]
        starts += [rng.normal(scale=0.4, size=model.ndof)
                   for _ in range(restarts)]
    best_q, best_rms = None, np.inf
    for s in starts:
        q, rms = _solve_ik_once(model, markers, valid, rows, s,
                                damping, tol, max_iter)
        if rms < best_rms:
            best_q, best_rms = q, rms
        if best_rms < tol:
            break
    if best_rms > max_residual:
        raise EkfError("inverse kinematics did not converge "
                       f"(residual {best_rms:.3e} m)")
    return canonicalize_angles(model, best_q)


def _wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def canonicalize_angles(model: KinematicModel, q: np.ndarray) -> np.ndarray:
    """Map joint angles to a canonical representative of their equivalence
    class: wrap into (-pi, pi] and, for XYZ Euler triples, pick the
    smaller-norm of the two representations of the same rotation,
    (a, b, c) vs (a + pi, pi - b, c + pi)."""
    q = np.array(q, dtype=float)
    k = 0
    for s in model.segments:
        nd = s.dof_count()
        rot = slice(k + nd - 3, k + nd) if s.joint in ("free", "ball") else None
        if s.joint == "revolute":
            q[k] = _wrap(q[k])
        elif rot is not None:
            a, b, c = q[rot]
            cand = _wrap([a, b, c])
            alt = _wrap([a + np.pi, np.pi - b, c + np.pi])
            q[rot] = alt if np.linalg.norm(alt) < np.linalg.norm(cand) \
                else cand
        k += nd
    return q


_FQ_CACHE: dict = {}


def _transition(ndof: int, n_der: int, dt: float):
    key = ("F", ndof, n_der, dt)
    F = _FQ_CACHE.get(key)
    if F is not None:
        return F
    F = np.eye(ndof * n_der)
    I = np.eye(ndof)
    F[:ndof, ndof:2 * ndof] = dt * I
    if n_der == 3:
        F[:ndof, 2 * ndof:] = 0.5 * dt * dt * I
        F[ndof:2 * ndof, 2 * ndof:] = dt * I
    if len(_FQ_CACHE) > 64:
        _FQ_CACHE.clear()
    _FQ_CACHE[key] = F
    return F


def _process_noise(ndof: int, n_der: int, dt: float, psd: float):
    # white noise driving the highest derivative, integrated over the step
    key = ("Q", ndof, n_der, dt, psd)
    hit = _FQ_CACHE.get(key)
    if hit is not None:
        return hit
    I = np.eye(ndof)
    if n_der == 2:
        blocks = [[dt ** 3 / 3, dt ** 2 / 2],
                  [dt ** 2 / 2, dt]]
    else:
        blocks = [[dt ** 5 / 20, dt ** 4 / 8, dt ** 3 / 6],
                  [dt ** 4 / 8, dt ** 3 / 3, dt ** 2 / 2],
                  [dt ** 3 / 6, dt ** 2 / 2, dt]]
    Q = np.zeros((ndof * n_der, ndof * n_der))
    for i in range(n_der):
        for j in range(n_der):
            Q[i * ndof:(i + 1) * ndof, j * ndof:(j + 1) * ndof] = \
                psd * blocks[i][j] * I
    _FQ_CACHE[key] = Q
    return Q


def ekf_init(model: KinematicModel, markers: np.ndarray,
             config: EkfConfig = EkfConfig()) -> EkfState:
    """Initialize from the first labeled frame: IK for the pose, zero
    derivatives, diagonal covariance."""
    q = solve_ik(model, markers)
    n = model.ndof * config.n_derivatives
    x = np.zeros(n)
    x[:model.ndof] = q
    P = config.initial_covariance * np.eye(n)
    return EkfState(x, P, model.ndof, config.n_derivatives)


def ekf_step(state: EkfState, model: KinematicModel, markers: np.ndarray,
             dt: float, config: EkfConfig = EkfConfig(),
             marker_sigma: np.ndarray | None = None) -> EkfState:
    """One predict/update cycle against a frame of 3D marker measurements.

    markers is (n_markers, 3); NaN rows are missing and handled per the
    configured policy. marker_sigma optionally overrides the per-marker
    measurement sigma (meters).
    """
    markers = np.asarray(markers, dtype=float)
    ndof, n_der = state.ndof, state.n_derivatives
    F = _transition(ndof, n_der, dt)
    Q = _process_noise(ndof, n_der, dt, config.process_noise_qddot)
    x = F @ state.x
    P = F @ state.P @ F.T + Q

    valid = np.all(np.isfinite(markers), axis=1)
    n_markers = markers.shape[0]
    sigma = np.full(n_markers, config.measurement_noise) \
        if marker_sigma is None else np.asarray(marker_sigma, dtype=float)

    q = x[:ndof]
    _, pred = model.forward_kinematics(q)
    Jm = model.marker_jacobian(q)             # (3*n_markers, ndof)

    if config.missing_marker_policy == "drop_rows":
        rows = np.repeat(valid, 3)
        z = markers[valid].ravel()
        h = pred[valid].ravel()
        Hj = Jm[rows]
        r_sigma = np.repeat(sigma[valid], 3)
    else:
        filled = np.where(valid[:, None], markers, pred)
        z = filled.ravel()
        h = pred.ravel()
        Hj = Jm
        s = np.where(valid, sigma, sigma * config.inflation_factor)
        r_sigma = np.repeat(s, 3)

    if z.size:
        H = np.zeros((z.size, ndof * n_der))
        H[:, :ndof] = Hj
        R = np.diag(r_sigma ** 2)
        S = H @ P @ H.T + R
        K = np.linalg.solve(S, H @ P).T
        x = x + K @ (z - h)
        IKH = np.eye(ndof * n_der) - K @ H
        P = IKH @ P @ IKH.T + K @ R @ K.T     # Joseph form

    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(P))):
        raise EkfError("filter diverged: non-finite state or covariance")
    return EkfState(x, P, ndof, n_der)
