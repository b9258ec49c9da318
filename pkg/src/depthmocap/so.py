"""EMG-informed static optimization.

Per frame, distribute the inverse-dynamics joint torques over muscle
activations by solving a convex box-constrained quadratic program in
(activations, residual joint torques). At fixed kinematics the Hill force is
affine in activation, so the muscle-torque map is linear and the whole cost
is quadratic. Torque tracking is a penalty, not a constraint.

The solver is an in-repo projected-Newton active-set method: free variables
take exact Newton steps, bound-clamped variables stay put, and convergence is
declared on the infinity norm of the projected gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import KinematicModel
from .muscle import _moment_arms_and_lengths, activation_affine_force_terms

RESIDUAL_TORQUE_BOUND = 5.0    # N*m


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SoWeights:
    w_emg: float = 10.0
    w_act: float = 1.0
    w_tau: float = 1000.0
    w_res: float = 10.0

    def __post_init__(self):
        if min(self.w_emg, self.w_act, self.w_tau, self.w_res) < 0:
            raise ValueError("weights must be non-negative")
        if self.w_tau <= 0:
            raise ValueError("torque tracking weight must be positive")


@dataclass
class SoResult:
    activations: np.ndarray
    residual_torques: np.ndarray
    muscle_torques: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    # affine force terms at the solved kinematics: force = gain * a + passive
    muscle_gain: np.ndarray = None
    muscle_passive: np.ndarray = None


def _solve_spd(H, rhs):
    # least-squares fallback covers semidefinite corner cases (slack muscles
    # with zero gain and zero activation weight)
    try:
        return np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, rhs, rcond=None)[0]


def solve_box_qp(H, g, lo, hi, tol: float = 1e-8,
                 max_iter: int = 500,
                 x0: np.ndarray | None = None) -> tuple[np.ndarray, float, int]:
    """Minimize 0.5 x^T H x + g^T x subject to lo <= x <= hi.

    H must be symmetric positive definite. x0 optionally warm-starts the
    iteration (e.g. the previous frame's solution). Returns
    (x, projected-gradient infinity norm, iterations).
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = g.shape[0]
    x = np.clip(_solve_spd(H, -g) if x0 is None
                else np.asarray(x0, dtype=float), lo, hi)
    for it in range(1, max_iter + 1):
        grad = H @ x + g
        pg = x - np.clip(x - grad, lo, hi)
        res = float(np.max(np.abs(pg))) if n else 0.0
        if res < tol:
            return x, res, it
        at_lo = x <= lo + 1e-14
        at_hi = x >= hi - 1e-14
        free = ~((at_lo & (grad > 0)) | (at_hi & (grad < 0)))
        # variables on a bound whose Newton step points outward would zero
        # the step length; clamp them and re-solve until none remain
        dx = np.zeros(n)
        while np.any(free):
            dx[:] = 0.0
            dx[free] = _solve_spd(H[np.ix_(free, free)], -grad[free])
            blocking = free & ((at_lo & (dx < 0)) | (at_hi & (dx > 0)))
            if not np.any(blocking):
                break
            free = free & ~blocking
        if not np.any(free):
            # everything clamped: fall back to an exact-line-search
            # projected gradient step
            d = -grad.copy()
            d[at_lo & (d < 0)] = 0.0
            d[at_hi & (d > 0)] = 0.0
            curv = d @ H @ d
            alpha = (d @ d) / curv if curv > 0 else 1.0
            x = np.clip(x + alpha * d, lo, hi)
            continue
        # step to the first bound crossing, then clamp
        step = 1.0
        pos = dx > 0
        neg = dx < 0
        if np.any(pos):
            step = min(step, float(np.min((hi[pos] - x[pos]) / dx[pos])))
        if np.any(neg):
            step = min(step, float(np.min((lo[neg] - x[neg]) / dx[neg])))
        x = np.clip(x + max(step, 1e-16) * dx, lo, hi)
    grad = H @ x + g
    res = float(np.max(np.abs(x - np.clip(x - grad, lo, hi))))
    if res >= tol:
        raise SolverError(f"box QP did not converge: projected gradient {res:.3e} "
                          f"after {max_iter} iterations")
    return x, res, max_iter


def static_optimization(model: KinematicModel, q, qdot, tau, emg_frame,
                        weights: SoWeights = SoWeights(),
                        residual_bound: float = RESIDUAL_TORQUE_BOUND,
                        tol: float = 1e-8,
                        warm_start: np.ndarray | None = None) -> SoResult:
    """Solve for activations and residual torques tracking tau and the EMG.

    emg_frame holds one normalized activation sample per EMG channel; muscles
    without a channel are EMG-non-informed and only get the activation
    minimization term. warm_start optionally stacks the previous frame's
    (activations, residual torques).
    """
    tau = np.asarray(tau, dtype=float)
    emg_frame = np.asarray(emg_frame, dtype=float)
    n_m = len(model.muscles)
    n_j = tau.shape[0]
    gamma, lmt = _moment_arms_and_lengths(model, q)    # (n_m, ndof)
    gain, passive = activation_affine_force_terms(model, q, qdot, gamma, lmt)

    A = gamma.T * gain                       # (n_j, n_m): d tau_m / d a
    b = gamma.T @ passive                    # passive muscle torques
    y = tau - b

    informed = np.array([m.emg_channel is not None for m in model.muscles])
    emg_target = np.zeros(n_m)
    for i, m in enumerate(model.muscles):
        if m.emg_channel is not None:
            emg_target[i] = emg_frame[m.emg_channel]

    D = np.where(informed, weights.w_emg, weights.w_act)
    n = n_m + n_j
    H = np.zeros((n, n))
    H[:n_m, :n_m] = 2.0 * (weights.w_tau * A.T @ A + np.diag(D))
    H[:n_m, n_m:] = 2.0 * weights.w_tau * A.T
    H[n_m:, :n_m] = H[:n_m, n_m:].T
    H[n_m:, n_m:] = 2.0 * (weights.w_tau + weights.w_res) * np.eye(n_j)
    g = np.concatenate([
        -2.0 * (weights.w_tau * A.T @ y + weights.w_emg * informed * emg_target),
        -2.0 * weights.w_tau * y,
    ])
    lo = np.concatenate([np.zeros(n_m), -residual_bound * np.ones(n_j)])
    hi = np.concatenate([np.ones(n_m), residual_bound * np.ones(n_j)])

    x, res, iters = solve_box_qp(H, g, lo, hi, tol=tol, x0=warm_start)
    a = x[:n_m]
    r = x[n_m:]
    tau_m = A @ a + b
    obj = so_objective(a, r, A, b, tau, emg_target, informed, weights)
    return SoResult(a, r, tau_m, obj, res, iters, gain, passive)


def so_objective(a, r, A, b, tau, emg_target, informed, weights: SoWeights) -> float:
    """Cost recomputed from the returned variables (solver cross-check)."""
    track = tau - (A @ a + b + r)
    return float(
        weights.w_emg * np.sum((a[informed] - emg_target[informed]) ** 2)
        + weights.w_act * np.sum(a[~informed] ** 2)
        + weights.w_tau * np.sum(track ** 2)
        + weights.w_res * np.sum(r ** 2))
