"""Kinematic / musculoskeletal model: definition, forward kinematics, Jacobians, scaling.

A model is a tree of rigid segments. Each segment connects to its parent through
one joint (free 6-DoF, ball-and-socket as intrinsic XYZ Euler angles, or a single
revolute axis). Markers and muscle via-points are attached in segment-local
coordinates, all in SI units.

Internally the joint set is compiled into a chain of elementary 1-DoF joints
(prismatic or revolute) so that forward kinematics, Jacobians and the dynamics
recursions all walk the same flat structure.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import axis_rotation

JOINT_TYPES = ("free", "ball", "revolute", "fixed")

_EYE3 = np.eye(3)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentDef:
    name: str
    parent: str | None
    joint: str                       # one of JOINT_TYPES
    axis: tuple[float, float, float] | None = None   # revolute only
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mass: float = 0.0
    com: tuple[float, float, float] = (0.0, 0.0, 0.0)
    inertia: tuple = ((0.0,) * 3,) * 3
    markers: tuple = ()              # ((name, (x, y, z)), ...)

    def dof_count(self) -> int:
        return {"free": 6, "ball": 3, "revolute": 1, "fixed": 0}[self.joint]


@dataclass(frozen=True)
class MuscleDef:
    name: str
    via_points: tuple                # ((segment, (x, y, z)), ...), ordered origin->insertion
    f_iso_max: float
    optimal_fiber_length: float
    tendon_slack_length: float
    pennation: float = 0.0
    emg_channel: int | None = None


@dataclass
class JointState:
    q: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)
        self.qddot = np.asarray(self.qddot, dtype=float)
        n = self.q.shape[0]
        if self.qdot.shape != (n,) or self.qddot.shape != (n,):
            raise ModelError("q, qdot, qddot must share the model DoF dimension")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))
                and np.all(np.isfinite(self.qddot))):
            raise ModelError("joint state entries must be finite")


@dataclass(frozen=True)
class ScaleFactors:
    per_segment: dict  # segment name -> 3-vector of dimensionless factors


@dataclass(frozen=True)
class _Dof:
    seg_index: int
    kind: str                        # 'p' prismatic | 'r' revolute
    local_axis: np.ndarray           # unit axis in the frame preceding this dof


class KinematicModel:
    """Immutable articulated model with a compiled elementary-joint chain."""

    def __init__(self, name: str, segments: list[SegmentDef],
                 muscles: list[MuscleDef] = (), thorax_ap: dict | None = None):
        self.name = name
        self.segments = list(segments)
        self.muscles = list(muscles)
        self.thorax_ap = thorax_ap   # {'segment', 'axis', 'markers': [a, b]} or None
        self._validate()
        self._compile()

    # -- construction ------------------------------------------------------

    def _validate(self):
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise ModelError("segment names must be unique")
        roots = [s for s in self.segments if s.parent is None]
        if len(roots) != 1:
            raise ModelError("model must have exactly one root segment")
        byname = {s.name: s for s in self.segments}
        for s in self.segments:
            if s.parent is not None and s.parent not in byname:
                raise ModelError(f"unknown parent '{s.parent}' for segment '{s.name}'")
            if s.joint not in JOINT_TYPES:
                raise ModelError(f"unknown joint type '{s.joint}'")
            if s.joint == "revolute" and s.axis is None:
                raise ModelError(f"revolute segment '{s.name}' needs an axis")
            if s.mass < 0:
                raise ModelError(f"segment '{s.name}' has negative mass")
            I = np.asarray(s.inertia, dtype=float)
            if not np.allclose(I, I.T, atol=1e-12):
                raise ModelError(f"segment '{s.name}' inertia not symmetric")
            if np.min(np.linalg.eigvalsh(I)) < -1e-12:
                raise ModelError(f"segment '{s.name}' inertia not positive semidefinite")
        # cycle check: walk each segment to the root
        for s in self.segments:
            seen, cur = {s.name}, s.parent
            while cur is not None:
                if cur in seen:
                    raise ModelError("segment parent graph has a cycle")
                seen.add(cur)
                cur = byname[cur].parent
        for m in self.muscles:
            if len(m.via_points) < 2:
                raise ModelError(f"muscle '{m.name}' needs >= 2 via points")
            if m.f_iso_max <= 0 or m.optimal_fiber_length <= 0:
                raise ModelError(f"muscle '{m.name}' has non-positive force/length")
            if not (0 <= m.pennation < np.pi / 2):
                raise ModelError(f"muscle '{m.name}' pennation out of range")
            for seg, _ in m.via_points:
                if seg not in byname:
                    raise ModelError(f"muscle '{m.name}' references unknown segment '{seg}'")

    def _compile(self):
        # topological order: parents before children
        byname = {s.name: i for i, s in enumerate(self.segments)}
        order, placed = [], set()
        pending = list(range(len(self.segments)))
        while pending:
            progressed = False
            for i in list(pending):
                s = self.segments[i]
                if s.parent is None or s.parent in placed:
                    order.append(i)
                    placed.add(s.name)
                    pending.remove(i)
                    progressed = True
            if not progressed:       # unreachable given cycle check
                raise ModelError("could not order segments")
        self.seg_order = order
        self.parent_index = [None if s.parent is None else byname[s.parent]
                             for s in self.segments]

        self.dofs: list[_Dof] = []
        self.seg_dof_slice: list[slice] = [slice(0, 0)] * len(self.segments)
        ex, ey, ez = np.eye(3)
        for i in order:
            s = self.segments[i]
            start = len(self.dofs)
            if s.joint == "free":
                for ax in (ex, ey, ez):
                    self.dofs.append(_Dof(i, "p", ax))
                for ax in (ex, ey, ez):
                    self.dofs.append(_Dof(i, "r", ax))
            elif s.joint == "ball":
                for ax in (ex, ey, ez):
                    self.dofs.append(_Dof(i, "r", ax))
            elif s.joint == "revolute":
                a = np.asarray(s.axis, dtype=float)
                self.dofs.append(_Dof(i, "r", a / np.linalg.norm(a)))
            self.seg_dof_slice[i] = slice(start, len(self.dofs))

        self.ndof = len(self.dofs)

        # elementary-chain parent per dof (-1 = world) and, per segment, the
        # dof its rigid body hangs from (nearest dof-bearing ancestor incl. self)
        self.dof_parent = [0] * self.ndof
        self.seg_attach_dof = [-1] * len(self.segments)
        for i in order:
            sl = self.seg_dof_slice[i]
            p = self.parent_index[i]
            prev = -1 if p is None else self.seg_attach_dof[p]
            for d in range(sl.start, sl.stop):
                self.dof_parent[d] = prev
                prev = d
            self.seg_attach_dof[i] = prev
        self.marker_names = []
        self.marker_segment = []     # segment index per marker
        self.marker_local = []
        for i in order:
            for mname, pos in self.segments[i].markers:
                self.marker_names.append(mname)
                self.marker_segment.append(i)
                self.marker_local.append(np.asarray(pos, dtype=float))
        if len(set(self.marker_names)) != len(self.marker_names):
            raise ModelError("marker names must be unique")
        self.n_markers = len(self.marker_names)

        # dof names, e.g. thorax_tx, arm_rx, elbow flexion -> lowerarm_r0
        self.dof_names = []
        for i in order:
            s = self.segments[i]
            if s.joint == "free":
                self.dof_names += [f"{s.name}_{c}" for c in
                                   ("tx", "ty", "tz", "rx", "ry", "rz")]
            elif s.joint == "ball":
                self.dof_names += [f"{s.name}_{c}" for c in ("rx", "ry", "rz")]
            elif s.joint == "revolute":
                self.dof_names.append(f"{s.name}_r")

    # -- kinematics --------------------------------------------------------

    def forward_kinematics(self, q) -> tuple[dict, np.ndarray]:
        """World transform per segment and stacked (n_markers, 3) marker positions."""
        q = np.asarray(q, dtype=float)
        if q.shape != (self.ndof,):
            raise ModelError(f"expected q of dim {self.ndof}, got {q.shape}")
        T = self._segment_transforms(q)
        markers = np.empty((self.n_markers, 3))
        for k in range(self.n_markers):
            Ts = T[self.marker_segment[k]]
            markers[k] = Ts[:3, :3] @ self.marker_local[k] + Ts[:3, 3]
        return ({self.segments[i].name: T[i] for i in range(len(self.segments))},
                markers)

    def _offset_vectors(self):
        cached = getattr(self, "_offset_vec_cache", None)
        if cached is None:
            cached = [np.asarray(s.offset, dtype=float) for s in self.segments]
            self._offset_vec_cache = cached
        return cached

    def _chain_pose(self, q, collect_frames: bool):
        """Walk the elementary-joint chain keeping rotation and translation
        separate (3x3 ops, no 4x4 products); optionally record world dof
        axes/origins alongside the segment transforms."""
        offsets = self._offset_vectors()
        n = len(self.segments)
        T = [None] * n
        axes = np.empty((self.ndof, 3)) if collect_frames else None
        origins = np.empty((self.ndof, 3)) if collect_frames else None
        for i in self.seg_order:
            p = self.parent_index[i]
            if p is None:
                R = _EYE3
                t = offsets[i]
            else:
                Tp = T[p]
                Rp = Tp[:3, :3]
                R = Rp
                t = Rp @ offsets[i] + Tp[:3, 3]
            for d in range(*self.seg_dof_slice[i].indices(self.ndof)):
                dof = self.dofs[d]
                if collect_frames:
                    axes[d] = R @ dof.local_axis
                    origins[d] = t
                if dof.kind == "p":
                    t = t + R @ (dof.local_axis * q[d])
                else:
                    R = R @ axis_rotation(dof.local_axis, q[d])
            Ti = np.empty((4, 4))
            Ti[:3, :3] = R
            Ti[:3, 3] = t
            Ti[3, :3] = 0.0
            Ti[3, 3] = 1.0
            T[i] = Ti
        return T, axes, origins

    def _segment_transforms(self, q) -> list[np.ndarray]:
        return self._chain_pose(q, collect_frames=False)[0]

    def _dof_frames(self, q):
        """World axis and world joint-origin point for every elementary dof.

        Returns (T_segments, axes (ndof,3), origins (ndof,3)). The origin of a
        revolute dof is a point on its rotation axis.
        """
        q = np.asarray(q, dtype=float)
        return self._chain_pose(q, collect_frames=True)

    def _ancestor_dofs(self, seg_index: int) -> list[int]:
        """Elementary dof indices affecting a segment, root first."""
        chain = []
        i = seg_index
        while i is not None:
            chain.append(i)
            i = self.parent_index[i]
        dofs = []
        for i in reversed(chain):
            dofs.extend(range(*self.seg_dof_slice[i].indices(self.ndof)))
        return dofs

    def _marker_dof_masks(self):
        """(n_markers, ndof) ancestor mask plus per-dof prismatic flags,
        cached (the kinematic structure is immutable)."""
        cached = getattr(self, "_marker_mask_cache", None)
        if cached is None:
            mask = np.zeros((self.n_markers, self.ndof), dtype=bool)
            for k in range(self.n_markers):
                mask[k, self._ancestor_dofs(self.marker_segment[k])] = True
            prismatic = np.array([d.kind == "p" for d in self.dofs])
            self._marker_mask_cache = (mask, prismatic)
            cached = self._marker_mask_cache
        return cached

    def marker_jacobian(self, q) -> np.ndarray:
        """(3 * n_markers, ndof) Jacobian of stacked marker positions."""
        q = np.asarray(q, dtype=float)
        if q.shape != (self.ndof,):
            raise ModelError(f"expected q of dim {self.ndof}, got {q.shape}")
        T, axes, origins = self._dof_frames(q)
        mask, prismatic = self._marker_dof_masks()
        P = np.empty((self.n_markers, 3))
        for k in range(self.n_markers):
            Ts = T[self.marker_segment[k]]
            P[k] = Ts[:3, :3] @ self.marker_local[k] + Ts[:3, 3]
        # revolute columns: axis x (marker - origin); prismatic: the axis
        Jr = np.cross(axes[None, :, :], P[:, None, :] - origins[None, :, :])
        Jp = np.broadcast_to(axes[None, :, :], Jr.shape)
        J = np.where(prismatic[None, :, None], Jp, Jr)
        J *= mask[:, :, None]
        # (n_markers, ndof, 3) -> (3 * n_markers, ndof)
        return J.transpose(0, 2, 1).reshape(3 * self.n_markers, self.ndof)

    def point_jacobian(self, q, seg_name: str, local_point,
                       frames=None) -> np.ndarray:
        """(6, ndof) Jacobian of a body point: rows 0-2 linear, 3-5 angular.

        frames optionally reuses a precomputed _dof_frames(q) triple."""
        si = [s.name for s in self.segments].index(seg_name)
        T, axes, origins = self._dof_frames(q) if frames is None else frames
        pw = T[si][:3, :3] @ np.asarray(local_point, dtype=float) + T[si][:3, 3]
        J = np.zeros((6, self.ndof))
        ad = np.array(self._ancestor_dofs(si), dtype=int)
        if ad.size:
            pris = np.array([self.dofs[d].kind == "p" for d in ad])
            ax = axes[ad]
            lin = np.where(pris[:, None], ax,
                           np.cross(ax, pw - origins[ad]))
            J[0:3, ad] = lin.T
            J[3:6, ad[~pris]] = ax[~pris].T
        return J

    def rest_markers(self) -> np.ndarray:
        _, m = self.forward_kinematics(np.zeros(self.ndof))
        return m

    def marker_index(self, name: str) -> int:
        return self.marker_names.index(name)

    # -- derived models ----------------------------------------------------

    def with_root_locked(self) -> "KinematicModel":
        """Root free joint replaced by a fixed joint (pose frozen at q_root = 0)."""
        segs = []
        for s in self.segments:
            if s.parent is None:
                if s.joint != "free":
                    raise ModelError("root is not a free joint")
                segs.append(replace(s, joint="fixed", axis=None))
            else:
                segs.append(s)
        return KinematicModel(self.name + "_rootlocked", segs, self.muscles,
                              self.thorax_ap)


# -- scaling ---------------------------------------------------------------

class ScalingError(ValueError):
    pass


_SCALE_BAND = (0.5, 2.0)


def scale_model(model: KinematicModel, static_markers: dict,
                thorax_width: float | None = None) -> tuple[KinematicModel, ScaleFactors]:
    """Scale a model so its rest geometry matches a static trial.

    static_markers maps marker name -> 3-vector (world, any rigid pose).
    Per-segment, per-axis factors come from solving measured inter-marker
    distances d^2 = sum_k s_k^2 dl_k^2 over the segment's marker pairs; axes not
    spanned by any pair fall back to the mean of the determined factors
    (isotropic fill). The thorax anteroposterior axis is overridden by
    thorax_width / rest width when both are available.
    """
    factors = {}
    for i, seg in enumerate(model.segments):
        local = [(mn, model.marker_local[k]) for k, mn in enumerate(model.marker_names)
                 if model.marker_segment[k] == i]
        if not local:
            factors[seg.name] = np.ones(3)
            continue
        missing = [mn for mn, _ in local if mn not in static_markers]
        if missing:
            raise ScalingError(f"unscalable segment '{seg.name}': "
                               f"missing markers {missing}")
        if len(local) < 2:
            factors[seg.name] = np.ones(3)
            continue
        rows, rhs, spanned = [], [], np.zeros(3, dtype=bool)
        for a in range(len(local)):
            for b in range(a + 1, len(local)):
                dl = local[b][1] - local[a][1]
                dm = (np.asarray(static_markers[local[b][0]], dtype=float)
                      - np.asarray(static_markers[local[a][0]], dtype=float))
                rows.append(dl ** 2)
                rhs.append(float(dm @ dm))
                spanned |= np.abs(dl) > 1e-4
        A = np.array(rows)[:, spanned]
        if A.size == 0:
            factors[seg.name] = np.ones(3)
            continue
        s2, *_ = np.linalg.lstsq(A, np.array(rhs), rcond=None)
        if np.any(s2 <= 0):
            raise ScalingError(f"segment '{seg.name}': implausible (non-positive) "
                               "squared scale factor")
        f = np.ones(3)
        f[spanned] = np.sqrt(s2)
        if not spanned.all():
            f[~spanned] = np.mean(f[spanned])
        factors[seg.name] = f

    if thorax_width is not None and model.thorax_ap is not None:
        ap = model.thorax_ap
        seg = ap["segment"]
        axis = int(ap["axis"])
        ma, mb = ap["markers"]
        rest = model.rest_markers()
        w0 = abs(rest[model.marker_index(ma)][axis] - rest[model.marker_index(mb)][axis])
        if w0 <= 0:
            raise ScalingError("model rest thorax width is zero")
        factors[seg][axis] = thorax_width / w0

    for name, f in factors.items():
        if np.any(f <= _SCALE_BAND[0]) or np.any(f >= _SCALE_BAND[1]):
            raise ScalingError(f"segment '{name}' scale factors {f} outside "
                               f"plausibility band {_SCALE_BAND}")

    segs = []
    for s in model.segments:
        f = factors[s.name]
        fp = factors[s.parent] if s.parent is not None else np.ones(3)
        I = np.asarray(s.inertia, dtype=float).copy()
        for k in range(3):
            I[k, k] *= f[k] ** 2
        segs.append(replace(
            s,
            offset=tuple(np.asarray(s.offset) * fp),
            com=tuple(np.asarray(s.com) * f),
            inertia=tuple(map(tuple, I)),
            markers=tuple((mn, tuple(np.asarray(p) * f)) for mn, p in s.markers),
        ))
    byname = {s.name: factors[s.name] for s in model.segments}
    muscles = [replace(m, via_points=tuple(
        (seg, tuple(np.asarray(p) * byname[seg])) for seg, p in m.via_points))
        for m in model.muscles]
    scaled = KinematicModel(model.name + "_scaled", segs, muscles, model.thorax_ap)
    return scaled, ScaleFactors({k: np.asarray(v) for k, v in factors.items()})


# -- JSON loading ----------------------------------------------------------

_SEGMENT_KEYS = {"name", "parent", "joint", "axis", "offset", "mass", "com",
                 "inertia", "markers"}
_MUSCLE_KEYS = {"name", "via_points", "f_iso_max", "optimal_fiber_length",
                "tendon_slack_length", "pennation", "emg_channel"}
_TOP_KEYS = {"name", "segments", "muscles", "thorax_ap"}


def _reject_unknown(d: dict, allowed: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ModelError(f"unknown fields {sorted(unknown)} in {where}")


def model_from_dict(doc: dict) -> KinematicModel:
    _reject_unknown(doc, _TOP_KEYS, "model file")
    segs = []
    for sd in doc["segments"]:
        _reject_unknown(sd, _SEGMENT_KEYS, f"segment '{sd.get('name', '?')}'")
        segs.append(SegmentDef(
            name=sd["name"],
            parent=sd.get("parent"),
            joint=sd["joint"],
            axis=tuple(sd["axis"]) if sd.get("axis") is not None else None,
            offset=tuple(sd.get("offset", (0, 0, 0))),
            mass=float(sd.get("mass", 0.0)),
            com=tuple(sd.get("com", (0, 0, 0))),
            inertia=tuple(map(tuple, sd.get("inertia", np.zeros((3, 3)).tolist()))),
            markers=tuple((m["name"], tuple(m["pos"])) for m in sd.get("markers", [])),
        ))
    muscles = []
    for md in doc.get("muscles", []):
        _reject_unknown(md, _MUSCLE_KEYS, f"muscle '{md.get('name', '?')}'")
        muscles.append(MuscleDef(
            name=md["name"],
            via_points=tuple((v[0], tuple(v[1])) for v in md["via_points"]),
            f_iso_max=float(md["f_iso_max"]),
            optimal_fiber_length=float(md["optimal_fiber_length"]),
            tendon_slack_length=float(md["tendon_slack_length"]),
            pennation=float(md.get("pennation", 0.0)),
            emg_channel=md.get("emg_channel"),
        ))
    return KinematicModel(doc["name"], segs, muscles, doc.get("thorax_ap"))


def load_model(path) -> KinematicModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def load_bundled(name: str) -> KinematicModel:
    """Load one of the shipped models: 'tracking4' or 'biomech10'."""
    ref = resources.files("depthmocap") / "data" / f"{name}.json"
    return model_from_dict(json.loads(ref.read_text()))
