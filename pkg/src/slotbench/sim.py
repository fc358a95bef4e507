"""Deterministic 1 kHz planar rigid-body stepper with penalty contacts.

One dynamic body (gripper + plate, fused rigid) is driven by a task-space
impedance controller against static world geometry (table floor, slot
walls, optional blocker box). Contacts use a spring-damper normal force
with a regularized Coulomb friction clamp; the summed contact wrench at
the end-effector is the haptic signal consumed by the environment.

The simulator is RNG-free and deterministic: identical inputs produce
bit-identical trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .se2 import Pose2, Twist2, Wrench2, inverse, wrap_angle

# Spacing of collision sample points along the plate's long edges. Dense
# enough to catch plate-edge vs wall-corner contact at shallow tilts.
_EDGE_SAMPLE_SPACING = 0.005

# Slip speed below which friction ramps linearly instead of switching sign.
_FRICTION_VEL_EPS = 1e-3

# Hard caps enforced by the stepper.
_MAX_LIN_VEL = 20.0
_MAX_ANG_VEL = 200.0


@dataclass(frozen=True)
class PlateShape:
    """Grasped-plate rectangle plus the rigid end-effector offset.

    half_width is half the plate thickness (x), half_height half the plate
    diameter (z). grasp_offset is the end-effector frame expressed in the
    plate-center frame; the default grips the plate at its top edge.
    """

    half_width: float = 0.005
    half_height: float = 0.115
    mass: float = 0.5
    inertia: float = 0.5 * (0.01**2 + 0.23**2) / 12.0
    grasp_offset: Pose2 = field(default_factory=lambda: Pose2(0.0, 0.115, 0.0))

    def __post_init__(self):
        if min(self.half_width, self.half_height, self.mass, self.inertia) <= 0:
            raise ValueError("plate dimensions, mass, and inertia must be positive")
        ref = rectangle_inertia(self.mass, self.half_width, self.half_height)
        if not (ref / 10.0 <= self.inertia <= ref * 10.0):
            raise ValueError(
                f"inertia {self.inertia} inconsistent with a "
                f"{self.mass} kg rectangle (expected near {ref})"
            )


def rectangle_inertia(mass: float, half_width: float, half_height: float) -> float:
    """Moment of inertia of a uniform rectangle about its center."""
    return mass * ((2 * half_width) ** 2 + (2 * half_height) ** 2) / 12.0


@dataclass(frozen=True)
class Box:
    """Axis-aligned static solid: center and half-extents."""

    cx: float
    cz: float
    hx: float
    hz: float


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.001
    kp: float = 150.0
    damping_ratio: float = 1.0
    err_scale_trans: float = 0.05
    err_scale_rot: float = 0.5
    contact_stiffness: float = 1.0e5
    contact_damping: float = 300.0
    friction_mu: float = 0.4
    # The grasp is modeled as gravity-compensated (the holder supports the
    # plate's weight), so the default net gravity on the body is zero.
    gravity: float = 0.0

    def __post_init__(self):
        if self.dt <= 0 or self.kp <= 0 or self.damping_ratio <= 0:
            raise ValueError("dt, kp, and damping_ratio must be positive")
        if self.contact_stiffness <= 0:
            raise ValueError("contact_stiffness must be positive")


@dataclass(frozen=True)
class BodyState:
    """End-effector pose in the base frame and its twist (point velocity
    of the end-effector plus angular velocity)."""

    pose: Pose2
    twist: Twist2 = field(default_factory=Twist2)


@dataclass
class ContactPoint:
    position: tuple[float, float]
    normal: tuple[float, float]
    penetration: float
    force: Wrench2 | None = None  # contribution on the plate, about the EE origin


@dataclass
class WorldGeometry:
    """Static slot geometry: floor, walls, and an optional blocker box.

    segments lists the exposed faces (for plotting and inspection); the
    boxes are the solids actually used for contact queries.
    """

    segments: list[tuple[tuple[float, float], tuple[float, float]]]
    slot_centers_x: list[float]
    slot_floor_z: float
    slot_top_z: float
    blocker: Box | None
    boxes: tuple[Box, ...] = ()

    def __post_init__(self):
        centers = self.slot_centers_x
        if len(centers) >= 2:
            pitches = np.diff(centers)
            if np.any(pitches <= 0) or not np.allclose(pitches, pitches[0]):
                raise ValueError("slot centers must increase with uniform pitch")
        # (cx, cz, hx, hz) rows, fixed order, for the vectorized queries.
        self._box_arr = np.array(
            [[b.cx, b.cz, b.hx, b.hz] for b in self.boxes], dtype=np.float64
        ).reshape(len(self.boxes), 4)
        # Highest solid surface; nothing above it can be in contact.
        self._max_top = max((b.cz + b.hz for b in self.boxes), default=-np.inf)


def spawn_world(
    num_slots: int = 3,
    slot_pitch: float = 0.10,
    wall_thickness: float = 0.01,
    wall_height: float = 0.06,
    floor_z: float = 0.0,
    blocker_slot: int | None = None,
    blocker_half_extents: tuple[float, float] = (0.0375, 0.025),
    plate_thickness: float = 0.01,
) -> WorldGeometry:
    """Build the slotted-holder world: floor, num_slots+1 walls, optional blocker."""
    if min(num_slots, slot_pitch, wall_thickness, wall_height) <= 0:
        raise ValueError("layout parameters must be positive")
    opening = slot_pitch - wall_thickness
    if opening <= plate_thickness:
        raise ValueError(
            f"slot opening {opening} m must exceed plate thickness {plate_thickness} m"
        )

    centers = [(i - (num_slots - 1) / 2.0) * slot_pitch for i in range(num_slots)]
    slot_top = floor_z + wall_height

    boxes: list[Box] = []
    floor_hx = num_slots * slot_pitch / 2.0 + 1.0
    floor_hz = 0.05
    boxes.append(Box(0.0, floor_z - floor_hz, floor_hx, floor_hz))
    wall_hx = wall_thickness / 2.0
    wall_hz = wall_height / 2.0
    for i in range(num_slots + 1):
        wx = (i - num_slots / 2.0) * slot_pitch
        boxes.append(Box(wx, floor_z + wall_hz, wall_hx, wall_hz))

    blocker = None
    if blocker_slot is not None:
        if not 0 <= blocker_slot < num_slots:
            raise ValueError(f"blocker_slot {blocker_slot} out of range")
        bhx, bhz = blocker_half_extents
        if 2 * bhx >= opening:
            raise ValueError("blocker wider than the slot opening")
        blocker = Box(centers[blocker_slot], floor_z + bhz, bhx, bhz)
        boxes.append(blocker)

    segments: list[tuple[tuple[float, float], tuple[float, float]]] = []
    segments.append(((-floor_hx, floor_z), (floor_hx, floor_z)))
    for b in boxes[1:]:
        x0, x1 = b.cx - b.hx, b.cx + b.hx
        z0, z1 = b.cz - b.hz, b.cz + b.hz
        segments += [((x0, z0), (x0, z1)), ((x1, z0), (x1, z1)), ((x0, z1), (x1, z1))]

    return WorldGeometry(
        segments=segments,
        slot_centers_x=centers,
        slot_floor_z=floor_z,
        slot_top_z=slot_top,
        blocker=blocker,
        boxes=tuple(boxes),
    )


@lru_cache(maxsize=8)
def _sample_points(half_width: float, half_height: float) -> np.ndarray:
    """Plate-boundary collision points in the plate frame: 4 corners plus
    interior samples along the two long (side) edges."""
    hw, hh = half_width, half_height
    pts = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
    n = max(1, int(round(2 * hh / _EDGE_SAMPLE_SPACING)))
    for i in range(1, n):
        z = -hh + 2 * hh * (i / n)
        pts.append((-hw, z))
    for i in range(1, n):
        z = -hh + 2 * hh * (i / n)
        pts.append((hw, z))
    return np.array(pts, dtype=np.float64)


def _plate_frame(pose: Pose2, shape: PlateShape) -> tuple[float, float, float]:
    """Plate-center frame (x, z, theta) for an end-effector pose."""
    inv = inverse(shape.grasp_offset)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return (
        pose.x + c * inv.x - s * inv.z,
        pose.z + s * inv.x + c * inv.z,
        pose.theta + inv.theta,
    )


def _detect_raw(
    pose: Pose2, shape: PlateShape, world: WorldGeometry
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized contact query.

    Returns (positions (n,2), outward normals (n,2), penetrations (n,)).
    For every (sample point, solid box) pair with the point strictly inside
    the box, one candidate is emitted on the face of minimum depth.
    """
    px, pz, pth = _plate_frame(pose, shape)
    local = _sample_points(shape.half_width, shape.half_height)
    c, s = math.cos(pth), math.sin(pth)
    wx = px + c * local[:, 0] - s * local[:, 1]
    wz = pz + s * local[:, 0] + c * local[:, 1]

    boxes = world._box_arr
    if boxes.shape[0] == 0 or wz.min() >= world._max_top:
        empty = np.empty((0, 2))
        return empty, empty, np.empty(0)

    dx = wx[:, None] - boxes[None, :, 0]  # (points, boxes)
    dz = wz[:, None] - boxes[None, :, 1]
    d_e = boxes[None, :, 2] - dx  # depth from +x face
    d_w = boxes[None, :, 2] + dx
    d_n = boxes[None, :, 3] - dz
    d_s = boxes[None, :, 3] + dz
    min_depth = np.minimum(np.minimum(d_e, d_w), np.minimum(d_n, d_s))
    pi, bi = np.nonzero(min_depth > 0.0)
    if pi.size == 0:
        empty = np.empty((0, 2))
        return empty, empty, np.empty(0)

    face = np.column_stack([d_e[pi, bi], d_w[pi, bi], d_n[pi, bi], d_s[pi, bi]]).argmin(axis=-1)
    normal_table = np.array(
        [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], dtype=np.float64
    )
    normals = normal_table[face]
    positions = np.column_stack([wx[pi], wz[pi]])
    return positions, normals, min_depth[pi, bi]


def _forces_raw(
    positions: np.ndarray,
    normals: np.ndarray,
    penetrations: np.ndarray,
    ee_x: float,
    ee_z: float,
    vx: float,
    vz: float,
    omega: float,
    cfg: SimConfig,
) -> tuple[np.ndarray, float, float, float]:
    """Fill penalty forces; returns per-contact forces (n,2) and the summed
    wrench on the plate about the end-effector origin (fx, fz, tau)."""
    if positions.shape[0] == 0:
        return np.empty((0, 2)), 0.0, 0.0, 0.0
    rx = positions[:, 0] - ee_x
    rz = positions[:, 1] - ee_z
    # Point velocity on the rigid body: v_ee + omega x r.
    vpx = vx - omega * rz
    vpz = vz + omega * rx
    approach = -(vpx * normals[:, 0] + vpz * normals[:, 1])
    fn = cfg.contact_stiffness * penetrations + cfg.contact_damping * approach
    fn = np.maximum(fn, 0.0)
    # Tangent = normal rotated +90 degrees; regularized Coulomb clamp.
    tx, tz = -normals[:, 1], normals[:, 0]
    vt = vpx * tx + vpz * tz
    ft = -cfg.friction_mu * fn * np.clip(vt / _FRICTION_VEL_EPS, -1.0, 1.0)
    forces = np.column_stack([fn * normals[:, 0] + ft * tx, fn * normals[:, 1] + ft * tz])
    fx = float(forces[:, 0].sum())
    fz = float(forces[:, 1].sum())
    tau = float((rx * forces[:, 1] - rz * forces[:, 0]).sum())
    return forces, fx, fz, tau


def detect_contacts(
    pose: Pose2, shape: PlateShape, world: WorldGeometry
) -> list[ContactPoint]:
    """Collision query: candidate contacts with positive penetration, forces unfilled."""
    positions, normals, pens = _detect_raw(pose, shape, world)
    return [
        ContactPoint(
            position=(float(positions[i, 0]), float(positions[i, 1])),
            normal=(float(normals[i, 0]), float(normals[i, 1])),
            penetration=float(pens[i]),
        )
        for i in range(pens.shape[0])
    ]


def contact_forces(
    contacts: list[ContactPoint], state: BodyState, cfg: SimConfig
) -> list[ContactPoint]:
    """Fill each contact's penalty force as a wrench about the end-effector origin."""
    if not contacts:
        return []
    positions = np.array([c.position for c in contacts])
    normals = np.array([c.normal for c in contacts])
    pens = np.array([c.penetration for c in contacts])
    forces, _, _, _ = _forces_raw(
        positions, normals, pens,
        state.pose.x, state.pose.z,
        state.twist.vx, state.twist.vz, state.twist.omega,
        cfg,
    )
    out = []
    for i, c in enumerate(contacts):
        rx = c.position[0] - state.pose.x
        rz = c.position[1] - state.pose.z
        fx, fz = float(forces[i, 0]), float(forces[i, 1])
        out.append(
            ContactPoint(
                position=c.position,
                normal=c.normal,
                penetration=c.penetration,
                force=Wrench2(fx, fz, rx * fz - rz * fx),
            )
        )
    return out


def end_effector_wrench(contacts: list[ContactPoint]) -> Wrench2:
    """Wrench exerted by the end-effector, isolated to contact effects: the
    negative of the summed contact wrench on the plate, in the base frame."""
    fx = fz = tau = 0.0
    for c in contacts:
        if c.force is None:
            raise ValueError("contact forces are unfilled")
        fx += c.force.fx
        fz += c.force.fz
        tau += c.force.tau
    return Wrench2(-fx, -fz, -tau)


def _impedance_raw(
    px: float, pz: float, pth: float,
    vx: float, vz: float, om: float,
    tx: float, tz: float, tth: float,
    shape: PlateShape, cfg: SimConfig,
) -> tuple[float, float, float]:
    kd_t = 2.0 * cfg.damping_ratio * math.sqrt(cfg.kp * shape.mass)
    kd_r = 2.0 * cfg.damping_ratio * math.sqrt(cfg.kp * shape.inertia)
    return (
        cfg.kp * cfg.err_scale_trans * (tx - px) - kd_t * vx,
        cfg.kp * cfg.err_scale_trans * (tz - pz) - kd_t * vz,
        cfg.kp * cfg.err_scale_rot * wrap_angle(tth - pth) - kd_r * om,
    )


def impedance_force(
    state: BodyState, target: Pose2, cfg: SimConfig, shape: PlateShape
) -> Wrench2:
    """Task-space impedance law: kp on the scaled pose error, critical-ratio
    damping on the end-effector twist (kd = 2*ratio*sqrt(kp*m_axis))."""
    fx, fz, tau = _impedance_raw(
        state.pose.x, state.pose.z, state.pose.theta,
        state.twist.vx, state.twist.vz, state.twist.omega,
        target.x, target.z, target.theta,
        shape, cfg,
    )
    return Wrench2(fx, fz, tau)


def _step_core(
    px: float, pz: float, pth: float,
    vx: float, vz: float, om: float,
    tx: float, tz: float, tth: float,
    shape: PlateShape, world: WorldGeometry, cfg: SimConfig,
) -> tuple[float, float, float, float, float, float, int, float, float, float]:
    """One low-level step on plain floats. Returns the new state tuple plus
    (contact count, end-effector contact wrench fx, fz, tau)."""
    imp_fx, imp_fz, imp_tau = _impedance_raw(
        px, pz, pth, vx, vz, om, tx, tz, tth, shape, cfg
    )

    # Plate-center (COM) frame and velocity.
    pose = Pose2(px, pz, pth)
    cx, cz, _ = _plate_frame(pose, shape)
    rcx, rcz = cx - px, cz - pz
    vcx = vx - om * rcz
    vcz = vz + om * rcx

    positions, normals, pens = _detect_raw(pose, shape, world)
    _, con_fx, con_fz, con_tau_ee = _forces_raw(
        positions, normals, pens, px, pz, vx, vz, om, cfg
    )

    # Totals about the COM. Contact torque was taken about the EE origin;
    # shift it: tau_com = tau_ee + (ee - com) x F_contact.
    fx_tot = imp_fx + con_fx
    fz_tot = imp_fz + con_fz + shape.mass * cfg.gravity
    tau_com = (
        imp_tau + (-rcx) * imp_fz - (-rcz) * imp_fx
        + con_tau_ee + (-rcx) * con_fz - (-rcz) * con_fx
    )

    dt = cfg.dt
    vcx += fx_tot / shape.mass * dt
    vcz += fz_tot / shape.mass * dt
    om_new = om + tau_com / shape.inertia * dt
    cx += vcx * dt
    cz += vcz * dt

    go = shape.grasp_offset
    th_com = pth - go.theta + om_new * dt
    c, s = math.cos(th_com), math.sin(th_com)
    px_new = cx + c * go.x - s * go.z
    pz_new = cz + s * go.x + c * go.z
    pth_new = wrap_angle(th_com + go.theta)

    # Back to the end-effector point velocity, then hard caps.
    rex, rez = px_new - cx, pz_new - cz
    vx_new = vcx - om_new * rez
    vz_new = vcz + om_new * rex
    vx_new = min(max(vx_new, -_MAX_LIN_VEL), _MAX_LIN_VEL)
    vz_new = min(max(vz_new, -_MAX_LIN_VEL), _MAX_LIN_VEL)
    om_new = min(max(om_new, -_MAX_ANG_VEL), _MAX_ANG_VEL)

    return (
        px_new, pz_new, pth_new, vx_new, vz_new, om_new,
        int(pens.shape[0]), -con_fx, -con_fz, -con_tau_ee,
    )


def step_lowlevel(
    state: BodyState,
    target: Pose2,
    shape: PlateShape,
    world: WorldGeometry,
    cfg: SimConfig,
) -> tuple[BodyState, list[ContactPoint]]:
    """One 1 kHz step: impedance + gravity + contacts, semi-implicit Euler."""
    contacts = contact_forces(detect_contacts(state.pose, shape, world), state, cfg)
    px, pz, pth, vx, vz, om, _, _, _, _ = _step_core(
        state.pose.x, state.pose.z, state.pose.theta,
        state.twist.vx, state.twist.vz, state.twist.omega,
        target.x, target.z, target.theta,
        shape, world, cfg,
    )
    return BodyState(Pose2(px, pz, pth), Twist2(vx, vz, om)), contacts
