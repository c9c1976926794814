import math

import numpy as np
import pytest

from egokin import geom
from egokin.fixtures import fixture_path
from egokin.geom import Se3Pose
from egokin.kinchain import (CycleError, IkConfig, NotConverged, ParseError,
                             UnknownLink, UnsupportedElement, export_native,
                             ik_dls, import_urdf_subset, parse_chain)

ONE_JOINT = """
link base
link arm
joint j revolute base arm origin 1 0 0 0 0 0 0.5 axis 0 0 1 limits -1 1
"""

PRISMATIC = """
link base
link slider
link tip
joint p prismatic base slider origin 1 0 0 0 0 0 0.1 axis 1 0 0 limits -0.5 0.5
joint f fixed slider tip origin 1 0 0 0 0.2 0 0
"""


def test_parse_one_joint():
    chain = parse_chain(ONE_JOINT)
    assert chain.n_joints == 1
    assert chain.joint_names == ["j"]
    assert chain.root == "base"


def test_parse_duplicate_child_is_cycle():
    text = ONE_JOINT + "joint j2 revolute base arm origin 1 0 0 0 0 0 0 axis 0 0 1 limits -1 1\n"
    with pytest.raises(CycleError):
        parse_chain(text)


def test_parse_errors():
    with pytest.raises(ParseError) as ei:
        parse_chain("link a\nbogus directive\n")
    assert ei.value.line == 2
    with pytest.raises(ParseError):
        parse_chain("link a\nlink b\njoint j revolute a b origin 1 0 0 0 0 0 0\n")
    with pytest.raises(UnknownLink):
        parse_chain("link a\njoint j fixed a missing origin 1 0 0 0 0 0 0\n")


def test_fixture_zero_fk_matches_hand_composed_origins(arm):
    # independent oracle: all fixture origins carry identity rotation, so
    # the zero-config pose is the plain sum of origin translations
    expected = np.zeros(3)
    for line in fixture_path("arm7.chain").read_text().splitlines():
        tok = line.split("#", 1)[0].split()
        if tok and tok[0] == "joint":
            i = tok.index("origin")
            assert tok[i + 1 : i + 5] == ["1", "0", "0", "0"]
            expected += [float(v) for v in tok[i + 5 : i + 8]]
    pose = arm.fk(np.zeros(7), "tool")
    assert np.allclose(pose.trans, expected, atol=1e-12)
    assert pose.is_close(Se3Pose(np.array([1.0, 0, 0, 0]), expected), tol=1e-12)
    # frozen from the fixture file: 0.30 + 0.30 + 0.25 + 0.02
    assert np.allclose(expected, [0.0, 0.0, 0.87])


def test_single_joint_rotation_rotates_descendants(arm):
    theta = 0.7
    q = np.zeros(7)
    q[0] = theta
    base = arm.fk(np.zeros(7), "tool")
    moved = arm.fk(q, "tool")
    rot = Se3Pose.from_axis_angle([0, 0, 1], theta, trans=[0, 0, 0.3])
    expected = geom.compose(rot, geom.compose(geom.inverse(Se3Pose(trans=np.array([0, 0, 0.3]))), base))
    assert moved.is_close(expected, tol=1e-9)


def test_fk_continuity(arm):
    rng = np.random.default_rng(5)
    q = rng.uniform(arm.lower, arm.upper)
    delta = 1e-6
    base = arm.fk(q, "tool")
    for i in range(7):
        dq = np.zeros(7)
        dq[i] = delta
        moved = arm.fk(q + dq, "tool")
        # total chain length bounds the positional Lipschitz constant
        assert np.linalg.norm(moved.trans - base.trans) <= 2.0 * delta


def test_fk_determinism(arm):
    rng = np.random.default_rng(9)
    q = rng.uniform(arm.lower, arm.upper)
    a = arm.fk(q, "tool")
    b = arm.fk(q.copy(), "tool")
    assert np.array_equal(a.as_7vec(), b.as_7vec())


def test_fk_unknown_link_and_bad_length(arm):
    with pytest.raises(UnknownLink):
        arm.fk(np.zeros(7), "nope")
    with pytest.raises(ValueError):
        arm.fk(np.zeros(6), "tool")


def test_jacobian_matches_finite_differences(arm):
    rng = np.random.default_rng(12)
    eps = 1e-6
    for _ in range(20):
        q = rng.uniform(arm.lower, arm.upper)
        J = arm.jacobian(q, "tool")
        T0 = arm.fk(q, "tool")
        for i in range(7):
            dq = np.zeros(7)
            dq[i] = eps
            rel = geom.compose(arm.fk(q + dq, "tool"), geom.inverse(T0))
            col = geom.log(rel).as_vector() / eps
            assert np.max(np.abs(col - J[:, i])) < 1e-5


def test_prismatic_jacobian_column():
    chain = parse_chain(PRISMATIC)
    J = chain.jacobian(np.array([0.3]), "tip")
    assert np.allclose(J[:3, 0], [1.0, 0.0, 0.0])
    assert np.allclose(J[3:, 0], 0.0)


def test_fixed_joints_contribute_no_columns(arm):
    J = arm.jacobian(np.zeros(7), "tool")
    assert J.shape == (6, 7)  # jtool is fixed, no 8th column


def test_ik_already_satisfied_returns_q0(arm):
    q0 = arm.mid_config()
    target = arm.fk(q0, "tool")
    out = ik_dls(arm, target, "tool", q0)
    assert np.array_equal(out, q0)


def test_ik_round_trip_seeded(arm):
    rng = np.random.default_rng(99)
    ok = 0
    for _ in range(60):
        qstar = rng.uniform(arm.lower, arm.upper)
        target = arm.fk(qstar, "tool")
        try:
            q = ik_dls(arm, target, "tool", arm.mid_config())
        except NotConverged:
            continue
        sol = arm.fk(q, "tool")
        assert np.linalg.norm(sol.trans - target.trans) < 1e-4
        assert geom.compose(target, geom.inverse(sol)).rotation_angle() < 1e-3
        assert np.all(q >= arm.lower) and np.all(q <= arm.upper)
        ok += 1
    assert ok >= 54  # the acceptance suite runs the full 500-trial bar


def test_ik_unreachable_monotone_trace(arm):
    target = Se3Pose(np.array([1.0, 0, 0, 0]), np.array([2.5, 0.0, 0.3]))
    with pytest.raises(NotConverged) as ei:
        ik_dls(arm, target, "tool", arm.mid_config())
    trace = ei.value.trace
    assert len(trace) > 1
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
    assert np.all(ei.value.q_best >= arm.lower - 1e-12)
    assert np.all(ei.value.q_best <= arm.upper + 1e-12)


def test_ik_rejects_q0_outside_limits(arm):
    q0 = arm.upper + 0.5
    with pytest.raises(ValueError):
        ik_dls(arm, arm.fk(arm.mid_config(), "tool"), "tool", q0)


def test_ik_degenerate_chain():
    chain = parse_chain("link a\nlink b\njoint f fixed a b origin 1 0 0 0 0 0 0.1\n")
    target = chain.fk(np.zeros(0), "b")
    out = ik_dls(chain, target, "b", np.zeros(0))
    assert out.size == 0
    with pytest.raises(NotConverged):
        ik_dls(chain, Se3Pose(trans=np.array([1.0, 0, 0])), "b", np.zeros(0))


MINIMAL_URDF = """
<robot name="r">
  <link name="base"><visual><geometry/></visual></link>
  <link name="arm"><inertial><mass value="1"/></inertial></link>
  <joint name="j" type="revolute">
    <parent link="base"/>
    <child link="arm"/>
    <origin xyz="0 0 0.5" rpy="0 0 0"/>
    <axis xyz="0 0 1"/>
    <limit lower="-1.5" upper="1.5" effort="10" velocity="1"/>
  </joint>
</robot>
"""


def test_urdf_minimal_revolute():
    chain = import_urdf_subset(MINIMAL_URDF)
    assert chain.n_joints == 1
    assert chain.joint_names == ["j"]
    pose = chain.fk(np.array([0.0]), "arm")
    assert np.allclose(pose.trans, [0, 0, 0.5])


def test_urdf_mimic_is_unsupported():
    bad = MINIMAL_URDF.replace("<axis", '<mimic joint="j"/><axis')
    with pytest.raises(UnsupportedElement) as ei:
        import_urdf_subset(bad)
    assert "mimic" in str(ei.value)


def test_urdf_continuous_type_unsupported():
    bad = MINIMAL_URDF.replace('type="revolute"', 'type="continuous"')
    with pytest.raises(UnsupportedElement):
        import_urdf_subset(bad)


def test_urdf_missing_limit_is_error():
    bad = MINIMAL_URDF.replace('<limit lower="-1.5" upper="1.5" effort="10" velocity="1"/>', "")
    with pytest.raises(ParseError):
        import_urdf_subset(bad)


def test_urdf_rpy_origin():
    urdf = MINIMAL_URDF.replace('rpy="0 0 0"', f'rpy="0 0 {math.pi / 2}"')
    chain = import_urdf_subset(urdf)
    pose = chain.fk(np.array([0.0]), "arm")
    expected = Se3Pose.from_axis_angle([0, 0, 1], math.pi / 2, trans=[0, 0, 0.5])
    assert pose.is_close(expected, tol=1e-9)


def test_urdf_native_round_trip_fk_equal():
    chain = import_urdf_subset(MINIMAL_URDF)
    chain2 = parse_chain(export_native(chain))
    rng = np.random.default_rng(3)
    for _ in range(100):
        q = rng.uniform(chain.lower, chain.upper)
        assert np.array_equal(chain.fk(q, "arm").as_7vec(), chain2.fk(q, "arm").as_7vec())


def test_native_export_round_trip_fixture(arm):
    chain2 = parse_chain(export_native(arm))
    rng = np.random.default_rng(4)
    for _ in range(100):
        q = rng.uniform(arm.lower, arm.upper)
        assert np.array_equal(arm.fk(q, "tool").as_7vec(), chain2.fk(q, "tool").as_7vec())
