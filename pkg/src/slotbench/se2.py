"""Planar rigid-body algebra: poses, twists, wrenches, and frame changes.

Convention: the plane is spanned by x (horizontal) and z (vertical, up
positive); theta rotates from +x toward +z. All units SI (meters, radians,
newtons). Angles are stored wrapped to (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

_TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return -((-theta + math.pi) % _TWO_PI - math.pi)


@dataclass(frozen=True)
class Pose2:
    """Planar pose (x, z, theta); theta is wrapped on construction."""

    x: float = 0.0
    z: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.z, self.theta)


@dataclass(frozen=True)
class Twist2:
    """Planar velocity: linear (vx, vz) in m/s, angular omega in rad/s."""

    vx: float = 0.0
    vz: float = 0.0
    omega: float = 0.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.vx, self.vz, self.omega)


@dataclass(frozen=True)
class Wrench2:
    """Planar force-torque: (fx, fz) in newtons, tau in newton-meters."""

    fx: float = 0.0
    fz: float = 0.0
    tau: float = 0.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.fx, self.fz, self.tau)

    def force_norm(self) -> float:
        return math.hypot(self.fx, self.fz)


IDENTITY = Pose2()


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Pose product a*b, equal to the 3x3 homogeneous-matrix product."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + c * b.x - s * b.z,
        a.z + s * b.x + c * b.z,
        a.theta + b.theta,
    )


def inverse(p: Pose2) -> Pose2:
    """Pose inverse: compose(p, inverse(p)) is the identity."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-(c * p.x + s * p.z), -(-s * p.x + c * p.z), -p.theta)


def relative_pose(ref: Pose2, p: Pose2) -> Pose2:
    """Pose of p expressed in the frame of ref: inverse(ref) * p."""
    return compose(inverse(ref), p)


def transform_wrench(frame: Pose2, w: Wrench2) -> Wrench2:
    """Re-express a wrench through a frame change (planar adjoint).

    The force is rotated by frame.theta; the torque picks up the moment of
    the rotated force about the frame origin: tau' = tau + x*fz' - z*fx'.
    """
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    fx = c * w.fx - s * w.fz
    fz = s * w.fx + c * w.fz
    return Wrench2(fx, fz, w.tau + frame.x * fz - frame.z * fx)


def pose_error_norms(p: Pose2) -> tuple[float, float]:
    """Split a pose error into (translation meters, |rotation| radians)."""
    return math.hypot(p.x, p.z), abs(wrap_angle(p.theta))


def rotate(theta: float, x: float, z: float) -> tuple[float, float]:
    """Rotate a plane vector by theta."""
    c, s = math.cos(theta), math.sin(theta)
    return c * x - s * z, s * x + c * z


def transform_point(frame: Pose2, x: float, z: float) -> tuple[float, float]:
    """Map a point from frame coordinates into the parent frame."""
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    return frame.x + c * x - s * z, frame.z + s * x + c * z
