import numpy as np
import pytest

from depthmocap.model import KinematicModel, MuscleDef, SegmentDef, load_bundled
from depthmocap.muscle import (
    f_act, f_pas, f_v, moment_arms, moment_arms_all, muscle_force,
    musculotendon_length,
)


def one_dof_muscle_model(d=0.03, lever=0.1):
    """Fixed base, one revolute z joint at the origin, muscle parallel to x
    at perpendicular distance d from the axis."""
    return KinematicModel("m1", [
        SegmentDef("base", None, "fixed",
                   markers=(("B", (0, 0, 0)),)),
        SegmentDef("link", "base", "revolute", axis=(0, 0, 1), mass=1.0),
    ], [MuscleDef("mus", (("base", (-lever, d, 0.0)), ("link", (lever, d, 0.0))),
                  f_iso_max=1000.0, optimal_fiber_length=0.1,
                  tendon_slack_length=0.1)])


def test_curves_at_reference_points():
    assert np.isclose(f_act(1.0), 1.0)
    assert f_pas(1.0) == 0.0 and f_pas(0.8) == 0.0
    assert np.isclose(f_pas(1.6), 1.0)
    assert np.isclose(f_v(0.0), 1.0)
    assert f_v(-1.0) == 0.0
    assert f_v(10.0) < 1.4 and f_v(10.0) > 1.35


def test_force_at_optimal_full_activation():
    m = one_dof_muscle_model()
    f, st = muscle_force(m, m.muscles[0], np.zeros(1), np.zeros(1), 1.0)
    assert np.isclose(st.norm_fiber_length, 1.0)
    assert np.isclose(f, 1000.0)      # f_act(1) = f_v(0) = 1, f_pas(1) = 0


def test_force_zero_activation_at_optimal():
    m = one_dof_muscle_model()
    f, _ = muscle_force(m, m.muscles[0], np.zeros(1), np.zeros(1), 0.0)
    assert f == 0.0


def test_force_matches_standalone_curve_oracle():
    # a=0.5, l=1.2, v=0, alpha=0.1: evaluate the documented formulas directly
    a, l, alpha = 0.5, 1.2, 0.1
    fo = 1000.0
    act = np.exp(-((l - 1.0) ** 2) / 0.45)
    pas = (np.exp(4.0 * (l - 1.0) / 0.6) - 1.0) / (np.exp(4.0) - 1.0)
    expected = fo * (a * act * 1.0 + pas) * np.cos(alpha)

    m = KinematicModel("m", [
        SegmentDef("base", None, "fixed"),
        SegmentDef("link", "base", "revolute", axis=(0, 0, 1)),
    ], [MuscleDef("mus", (("base", (-0.1, 0.03, 0)), ("link", (0.1, 0.03, 0))),
                  f_iso_max=fo, optimal_fiber_length=0.1,
                  # slack chosen so the fiber sits at 1.2 optimal lengths
                  tendon_slack_length=0.2 - 0.12 * np.cos(alpha),
                  pennation=alpha)])
    f, st = muscle_force(m, m.muscles[0], np.zeros(1), np.zeros(1), a)
    assert np.isclose(st.norm_fiber_length, 1.2)
    assert np.isclose(f, expected, rtol=1e-12)


def test_slack_muscle_zero_force():
    m = one_dof_muscle_model()
    from dataclasses import replace
    slackmus = replace(m.muscles[0], tendon_slack_length=0.5)
    m2 = KinematicModel("m", m.segments, [slackmus])
    f, _ = muscle_force(m2, m2.muscles[0], np.zeros(1), np.zeros(1), 1.0)
    assert f == 0.0


def test_force_affine_in_activation():
    m = load_bundled("biomech10")
    q = np.random.default_rng(0).normal(scale=0.2, size=m.ndof)
    qd = np.random.default_rng(1).normal(scale=0.5, size=m.ndof)
    for mus in m.muscles[:4]:
        f0, _ = muscle_force(m, mus, q, qd, 0.0)
        f5, _ = muscle_force(m, mus, q, qd, 0.5)
        f1, _ = muscle_force(m, mus, q, qd, 1.0)
        assert np.isclose(f5 - f0, 0.5 * (f1 - f0), rtol=1e-12, atol=1e-12)


def test_moment_arm_planar_geometry():
    d = 0.03
    m = one_dof_muscle_model(d=d)
    g = moment_arms(m, m.muscles[0], np.zeros(1))
    assert np.isclose(g[0], d, atol=1e-6)   # perpendicular distance oracle


def test_moment_arm_zero_when_no_joint_crossed():
    m = load_bundled("biomech10")
    # muscle living entirely on the thorax
    from depthmocap.model import MuscleDef as MD
    mus = MD("local", (("thorax", (0.1, 0, 0)), ("thorax", (0, 0.1, 0))),
             f_iso_max=100, optimal_fiber_length=0.05,
             tendon_slack_length=0.05)
    m2 = KinematicModel("x", m.segments, [mus])
    g = moment_arms_all(m2, np.zeros(m2.ndof))
    assert np.allclose(g, 0.0, atol=1e-9)


def test_moment_arm_virtual_work_sign():
    # positive moment arm: muscle force creates positive joint torque
    m = one_dof_muscle_model()
    mus = m.muscles[0]
    g = moment_arms(m, mus, np.zeros(1))
    f, _ = muscle_force(m, mus, np.zeros(1), np.zeros(1), 1.0)
    tau_m = g * f
    # virtual work: tau = -d(l_mt)/dq * f via finite differences
    h = 1e-6
    lp = musculotendon_length(m, mus, np.array([h]))
    lm = musculotendon_length(m, mus, np.array([-h]))
    assert np.isclose(tau_m[0], -(lp - lm) / (2 * h) * f, atol=1e-6 * f)


def test_fiber_velocity_from_joint_velocity():
    m = one_dof_muscle_model()
    mus = m.muscles[0]
    qd = np.array([2.0])
    _, st = muscle_force(m, mus, np.zeros(1), qd, 0.5)
    # shortening when the joint motion reduces musculotendon length
    g = moment_arms(m, mus, np.zeros(1))
    v_mt = -g @ qd
    assert np.isclose(st.norm_fiber_velocity, v_mt / (0.1 * 10.0), atol=1e-9)
