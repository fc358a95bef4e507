import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slotbench.se2 import (
    IDENTITY,
    Pose2,
    Wrench2,
    compose,
    inverse,
    pose_error_norms,
    relative_pose,
    transform_wrench,
    wrap_angle,
)


def hom(p: Pose2) -> np.ndarray:
    """Independent 3x3 homogeneous-matrix form of a pose."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array([[c, -s, p.x], [s, c, p.z], [0.0, 0.0, 1.0]])


def from_hom(m: np.ndarray) -> Pose2:
    return Pose2(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))


def assert_pose_close(a: Pose2, b: Pose2, tol=1e-12):
    assert abs(a.x - b.x) <= tol
    assert abs(a.z - b.z) <= tol
    assert abs(wrap_angle(a.theta - b.theta)) <= tol


poses = st.builds(
    Pose2,
    st.floats(-5, 5),
    st.floats(-5, 5),
    st.floats(-10, 10),
)


class TestCompose:
    def test_identity_left(self):
        p = Pose2(0.3, -1.2, 0.7)
        assert_pose_close(compose(IDENTITY, p), p)

    def test_inverse_gives_identity(self):
        p = Pose2(0.3, -1.2, 0.7)
        assert_pose_close(compose(p, inverse(p)), IDENTITY)

    def test_against_matrix_oracle(self):
        a = Pose2(1.0, 0.0, math.pi / 2)
        b = Pose2(1.0, 0.0, 0.0)
        expected = from_hom(hom(a) @ hom(b))
        got = compose(a, b)
        assert_pose_close(got, expected, tol=1e-15)
        assert_pose_close(got, Pose2(1.0, 1.0, math.pi / 2), tol=1e-15)

    @given(a=poses, b=poses)
    @settings(max_examples=200)
    def test_matches_matrix_product(self, a, b):
        assert_pose_close(compose(a, b), from_hom(hom(a) @ hom(b)), tol=1e-9)


class TestInverse:
    def test_identity(self):
        assert_pose_close(inverse(IDENTITY), IDENTITY)

    def test_pure_translation_negates(self):
        assert_pose_close(inverse(Pose2(1.0, 2.0, 0.0)), Pose2(-1.0, -2.0, 0.0))

    def test_against_matrix_oracle(self):
        p = Pose2(1.0, 0.0, math.pi / 2)
        expected = from_hom(np.linalg.inv(hom(p)))
        got = inverse(p)
        assert_pose_close(got, expected, tol=1e-12)
        assert_pose_close(got, Pose2(0.0, 1.0, -math.pi / 2), tol=1e-15)


class TestRelativePose:
    def test_self_is_identity(self):
        p = Pose2(0.4, 0.1, -2.0)
        assert_pose_close(relative_pose(p, p), IDENTITY)

    def test_from_identity(self):
        p = Pose2(0.4, 0.1, -2.0)
        assert_pose_close(relative_pose(IDENTITY, p), p)

    def test_against_matrix_oracle(self):
        ref = Pose2(1.0, 0.0, math.pi / 2)
        p = Pose2(1.0, 1.0, math.pi / 2)
        expected = from_hom(np.linalg.inv(hom(ref)) @ hom(p))
        got = relative_pose(ref, p)
        assert_pose_close(got, expected, tol=1e-12)
        assert_pose_close(got, Pose2(1.0, 0.0, 0.0), tol=1e-15)

    @given(ref=poses, d=poses)
    @settings(max_examples=200)
    def test_round_trip(self, ref, d):
        assert_pose_close(relative_pose(ref, compose(ref, d)), d, tol=1e-10)


class TestTransformWrench:
    def test_identity_frame(self):
        w = Wrench2(3.0, -2.0, 0.5)
        out = transform_wrench(IDENTITY, w)
        assert out == w

    def test_pure_rotation(self):
        out = transform_wrench(Pose2(0, 0, math.pi / 2), Wrench2(1.0, 0.0, 0.0))
        assert abs(out.fx) < 1e-15
        assert abs(out.fz - 1.0) < 1e-15
        assert abs(out.tau) < 1e-15

    def test_moment_arm(self):
        out = transform_wrench(Pose2(1.0, 0.0, 0.0), Wrench2(0.0, 1.0, 0.0))
        assert out == Wrench2(0.0, 1.0, 1.0)

    @given(frame=poses, fx=st.floats(-10, 10), fz=st.floats(-10, 10), tau=st.floats(-10, 10))
    @settings(max_examples=200)
    def test_preserves_force_magnitude(self, frame, fx, fz, tau):
        w = Wrench2(fx, fz, tau)
        out = transform_wrench(frame, w)
        assert abs(out.force_norm() - w.force_norm()) <= 1e-12


class TestPoseErrorNorms:
    def test_identity(self):
        assert pose_error_norms(IDENTITY) == (0.0, 0.0)

    def test_three_four_five(self):
        trans, rot = pose_error_norms(Pose2(0.3, 0.4, 0.0))
        assert abs(trans - 0.5) < 1e-15
        assert rot == 0.0

    def test_wraps_before_abs(self):
        _, rot = pose_error_norms(Pose2(0.0, 0.0, 3 * math.pi / 2))
        assert abs(rot - math.pi / 2) < 1e-12


class TestInvariants:
    def test_associativity(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a, b, c = (
                Pose2(*rng.uniform(-3, 3, 2), rng.uniform(-math.pi, math.pi))
                for _ in range(3)
            )
            assert_pose_close(
                compose(compose(a, b), c), compose(a, compose(b, c)), tol=1e-10
            )

    @given(theta=st.floats(-100, 100))
    def test_theta_always_in_range(self, theta):
        p = Pose2(0, 0, theta)
        assert -math.pi < p.theta <= math.pi

    def test_wrap_boundary(self):
        assert wrap_angle(math.pi) == math.pi
        assert wrap_angle(-math.pi) == math.pi
        assert abs(wrap_angle(3 * math.pi) - math.pi) < 1e-12
