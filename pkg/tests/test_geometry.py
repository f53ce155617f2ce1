import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from laserodom.geometry import (
    MotionDelta,
    Pose2D,
    Pose3D,
    orthonormalize,
    relative_motion,
    se2_angle,
    se2_inverse,
    se2_matrix,
    wrap_angle,
)

angles = st.floats(-50.0, 50.0, allow_nan=False)
coords = st.floats(-1e3, 1e3, allow_nan=False)


@given(angles)
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_wrap_angle_edges():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(0.0) == 0.0


def test_motion_delta_rejects_negative_distance():
    with pytest.raises(ValueError):
        MotionDelta(-0.1, 0.0)
    with pytest.raises(ValueError):
        MotionDelta(1.0, float("nan"))


def test_forward_is_plus_y_at_zero_heading():
    assert np.allclose(Pose2D(0, 0, 0).forward(), [0.0, 1.0])
    assert np.allclose(Pose2D(0, 0, math.pi / 2).forward(), [1.0, 0.0])


@given(coords, coords, angles)
def test_matrix_round_trip(x, y, th):
    p = Pose2D(x, y, th)
    q = Pose2D.from_matrix(p.as_matrix())
    assert math.isclose(q.x, p.x) and math.isclose(q.y, p.y)
    assert abs(wrap_angle(q.theta - p.theta)) < 1e-12


@given(coords, coords, angles)
def test_se2_inverse(x, y, th):
    m = se2_matrix(x, y, th)
    assert np.allclose(se2_inverse(m) @ m, np.eye(3), atol=1e-9)
    # matrix angle is counter-clockwise while heading is clockwise, offset by the +y reference
    assert abs(wrap_angle(se2_angle(m) - (math.pi / 2 - th))) < 1e-12


@given(coords, coords, angles)
def test_pose3d_embedding_round_trip(x, y, th):
    p = Pose2D(x, y, th)
    q = p.to_pose3d().to_pose2d()
    assert math.isclose(q.x, p.x, abs_tol=1e-9) and math.isclose(q.y, p.y, abs_tol=1e-9)
    assert abs(wrap_angle(q.theta - p.theta)) < 1e-12


def test_relative_to_origin_is_identity():
    p = Pose2D(3.0, -2.0, 0.7)
    r = p.relative_to(p)
    assert abs(r.x) < 1e-12 and abs(r.y) < 1e-12 and abs(r.theta) < 1e-12


def test_relative_to_moves_forward_along_y():
    origin = Pose2D(5.0, 5.0, math.pi / 2)  # facing +x
    ahead = Pose2D(7.0, 5.0, math.pi / 2)
    r = ahead.relative_to(origin)
    assert np.allclose([r.x, r.y, r.theta], [0.0, 2.0, 0.0], atol=1e-12)


def test_pose3d_checks_orthonormality():
    with pytest.raises(ValueError):
        Pose3D(np.diag([1.0, 1.0, 1.1]), np.zeros(3))


def test_orthonormalize_nearest_rotation():
    rng = np.random.default_rng(0)
    r = orthonormalize(np.eye(3) + rng.normal(0, 1e-5, (3, 3)))
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert math.isclose(np.linalg.det(r), 1.0)


def test_relative_motion_planar():
    a = Pose2D(0.0, 0.0, 0.1).to_pose3d()
    b = Pose2D(0.3, 0.4, 0.15).to_pose3d()
    m = relative_motion(a, b)
    assert math.isclose(m.delta_d, 0.5)
    assert math.isclose(m.delta_theta, 0.05, abs_tol=1e-12)


@given(st.floats(-3.14159, 3.14159))
def test_wrap_angle_leaves_in_range_values_alone(a):
    assert wrap_angle(a) == a
