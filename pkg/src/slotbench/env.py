"""The plate-insertion MDP.

Wraps the contact simulator in the policy-facing episode loop: per-episode
uniform target-pose noise with a piecewise-linear curriculum, inference
delay injected as low-level steps holding the previous target, residual
action composition toward the noisy goal, history-stacked (relative pose,
wrench) observations, the five-term reward, and success/jam/horizon
termination.

One environment instance owns one RNG stream and is single-threaded;
parallel collection uses independent instances with disjoint seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .se2 import Pose2, Twist2, compose, pose_error_norms, relative_pose, rotate, wrap_angle
from .sim import PlateShape, SimConfig, WorldGeometry, _plate_frame, _sample_points, _step_core, spawn_world


@dataclass(frozen=True)
class Curriculum:
    """Piecewise-linear noise multiplier over training iterations."""

    breakpoints: tuple[tuple[int, float], ...]

    def __post_init__(self):
        its = [b[0] for b in self.breakpoints]
        fracs = [b[1] for b in self.breakpoints]
        if not self.breakpoints:
            raise ValueError("curriculum needs at least one breakpoint")
        if any(nxt <= prev for prev, nxt in zip(its[:-1], its[1:])):
            raise ValueError("breakpoint iterations must strictly increase")
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ValueError("fractions must lie in [0, 1]")
        if fracs[-1] != 1.0:
            raise ValueError("final fraction must be 1")

    def fraction(self, iteration: int) -> float:
        pts = self.breakpoints
        if iteration <= pts[0][0]:
            return pts[0][1]
        for (i0, f0), (i1, f1) in zip(pts[:-1], pts[1:]):
            if iteration <= i1:
                t = (iteration - i0) / (i1 - i0)
                return min(1.0, max(0.0, f0 + t * (f1 - f0)))
        return pts[-1][1]


def default_curriculum(total_iterations: int = 5000) -> Curriculum:
    """Hold zero noise for the first 10% of training, ramp to full by 50%."""
    hold = max(1, int(0.1 * total_iterations))
    full = max(hold + 1, int(0.5 * total_iterations))
    return Curriculum(((0, 0.0), (hold, 0.0), (full, 1.0)))


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 128
    history: int = 8
    lowlevel_per_policy: int = 50
    delay_range: tuple[int, int] = (7, 13)
    eps_trans_max: float = 0.05
    eps_rot_max: float = math.radians(5.0)
    action_scale_trans: float = 0.45
    action_scale_rot: float = math.radians(50.0)
    success_hold: int = 10
    success_dx: float = 0.045
    success_depth: float = 0.02  # success height = slot_top_z - success_depth
    jam_force: float = 50.0
    jam_hold: int = 200
    partial_insert_prob: float = 0.5
    start_x_halfwidth: float = 0.10
    # Clearance band of the plate bottom above the slot top at reset.
    start_z_range: tuple[float, float] = (0.10, 0.25)
    include_velocity: bool = False
    # Reward constants.
    k_dist_trans: float = 8.59e-3
    k_dist_rot: float = 8.21e-3
    k_da_trans: float = 8.59e-3
    k_da_rot: float = 8.21e-3
    lam_dist_trans: float = 0.5
    lam_dist_rot: float = math.radians(30.0)
    lam_da_trans: float = 0.5
    lam_da_rot: float = math.radians(30.0)
    r_drop: float = -1.1
    r_success: float = 0.5
    # Strict pose tolerance, logged per episode but not used for termination.
    strict_success_trans: float = 0.02
    strict_success_rot: float = math.radians(10.0)
    # World layout.
    num_slots: int = 3
    slot_pitch: float = 0.10
    wall_thickness: float = 0.01
    wall_height: float = 0.06
    blocker_mode: str = "none"  # none | target | random | fixed
    blocker_fixed_slot: int = 0  # used only when blocker_mode == "fixed"
    blocker_half_extents: tuple[float, float] = (0.0375, 0.025)
    curriculum: Curriculum = field(default_factory=default_curriculum)

    def __post_init__(self):
        if self.horizon <= 0 or self.history < 1:
            raise ValueError("horizon must be positive and history >= 1")
        lo, hi = self.delay_range
        if not (0 <= lo <= hi <= self.lowlevel_per_policy):
            raise ValueError("delay_range must lie within [0, lowlevel_per_policy]")
        if self.action_scale_trans <= 0 or self.action_scale_rot <= 0:
            raise ValueError("action scales must be positive")
        if self.eps_trans_max < 0 or self.eps_rot_max < 0:
            raise ValueError("noise amplitudes must be non-negative")
        if self.blocker_mode not in ("none", "target", "random"):
            raise ValueError(f"unknown blocker_mode {self.blocker_mode!r}")

    @property
    def frame_dim(self) -> int:
        return 9 if self.include_velocity else 6

    @property
    def obs_dim(self) -> int:
        return self.frame_dim * self.history


@dataclass(frozen=True)
class Frame:
    """One observation frame: pose and wrench relative to the noisy goal."""

    rel_pose: tuple[float, float, float]
    wrench: tuple[float, float, float]
    twist: tuple[float, float, float]


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: str  # "success" | "jam" | "none"
    truncated: bool
    info: dict


def curriculum_epsilon(
    iteration: int, curriculum: Curriculum, cfg: EnvConfig
) -> tuple[float, float]:
    """Noise amplitudes at a training iteration."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    f = curriculum.fraction(iteration)
    return f * cfg.eps_trans_max, f * cfg.eps_rot_max


def compose_target(current: Pose2, noisy_goal: Pose2, action, cfg: EnvConfig) -> Pose2:
    """Residual action composed with the goal-seeking base, in normalized
    action space, then scaled into a pose target relative to the current pose.

    Per-axis base-frame errors; both the base term and the composite are
    clamped to [-1, 1], so action == 0 reproduces pure goal seeking and the
    composite never exceeds the action scales.
    """
    scales = (cfg.action_scale_trans, cfg.action_scale_trans, cfg.action_scale_rot)
    err = (
        noisy_goal.x - current.x,
        noisy_goal.z - current.z,
        wrap_angle(noisy_goal.theta - current.theta),
    )
    out = []
    for a, e, s in zip(action, err, scales):
        base = min(1.0, max(-1.0, e / s))
        a = min(1.0, max(-1.0, float(a)))
        out.append(min(1.0, max(-1.0, a + base)) * s)
    return Pose2(current.x + out[0], current.z + out[1], current.theta + out[2])


def reward(
    rel_pose_true: Pose2,
    action,
    prev_action,
    cfg: EnvConfig,
    *,
    success: bool = False,
    jam: bool = False,
) -> float:
    """Five-term reward: time penalty, success, drop/jam, cutoff distance
    penalty to the TRUE goal, and cutoff action-change penalty."""
    r = -1.0 / cfg.horizon
    if jam:
        r += cfg.r_drop
    if success:
        r += cfg.r_success
    err_t, err_r = pose_error_norms(rel_pose_true)
    r -= cfg.k_dist_trans * min(cfg.lam_dist_trans, err_t)
    r -= cfg.k_dist_rot * min(cfg.lam_dist_rot, err_r)
    da = [float(a) - float(p) for a, p in zip(action, prev_action)]
    da_t = math.hypot(da[0], da[1]) * cfg.action_scale_trans
    da_r = abs(da[2]) * cfg.action_scale_rot
    r -= cfg.k_da_trans * min(cfg.lam_da_trans, da_t)
    r -= cfg.k_da_rot * min(cfg.lam_da_rot, da_r)
    return r


def plate_bottom_and_center(pose: Pose2, shape: PlateShape) -> tuple[float, float]:
    """(lowest corner z, plate-center x) for a body pose."""
    cx, cz, cth = _plate_frame(pose, shape)
    c, s = math.cos(cth), math.sin(cth)
    hw, hh = shape.half_width, shape.half_height
    corners_z = [cz + s * x + c * z for x in (-hw, hw) for z in (-hh, hh)]
    return min(corners_z), cx


def check_success(
    pose: Pose2,
    shape: PlateShape,
    world: WorldGeometry,
    counter: int,
    cfg: EnvConfig,
) -> tuple[bool, bool, int]:
    """Success-region membership and episode success after a consecutive hold.

    Returns (in_region, episode_success, new_counter). The region covers any
    slot: plate bottom below the height threshold and plate-center x within
    success_dx of the nearest slot center.
    """
    bottom, center_x = plate_bottom_and_center(pose, shape)
    height_ok = bottom < world.slot_top_z - cfg.success_depth
    dx = min(abs(center_x - c) for c in world.slot_centers_x)
    in_region = bool(height_ok and dx < cfg.success_dx)
    counter = counter + 1 if in_region else 0
    return in_region, counter >= cfg.success_hold, counter


def check_failure(wrench_norms, step_count: int, cfg: EnvConfig) -> str:
    """Failure classification over a history of per-low-level-step wrench
    norms: 'jam' on a consecutive run above jam_force, else 'horizon' at the
    step limit, else 'none'."""
    run = 0
    for w in wrench_norms:
        run = run + 1 if w > cfg.jam_force else 0
        if run >= cfg.jam_hold:
            return "jam"
    if step_count >= cfg.horizon:
        return "horizon"
    return "none"


def build_observation(frames, cfg: EnvConfig) -> np.ndarray:
    """Flatten the newest-first frame ring into the policy observation.

    Missing history (before episode start) is padded with the oldest real
    frame; output length is frame_dim * H, constant for a fixed config.
    """
    if not frames:
        raise ValueError("history ring is empty")
    frames = list(frames)[: cfg.history]
    while len(frames) < cfg.history:
        frames.append(frames[-1])
    parts = []
    for f in frames:
        parts.extend(f.rel_pose)
        parts.extend(f.wrench)
        if cfg.include_velocity:
            parts.extend(f.twist)
    return np.array(parts, dtype=np.float64)


class InsertionEnv:
    """Gym-style episode loop over the contact simulator."""

    def __init__(
        self,
        cfg: EnvConfig | None = None,
        sim_cfg: SimConfig | None = None,
        shape: PlateShape | None = None,
        seed: int | None = None,
    ):
        self.cfg = cfg if cfg is not None else EnvConfig()
        self.sim_cfg = sim_cfg if sim_cfg is not None else SimConfig()
        self.shape = shape if shape is not None else PlateShape()
        self._rng = np.random.default_rng(seed)
        self._world_cache: dict[int | None, WorldGeometry] = {}
        self.world: WorldGeometry | None = None
        self._body = None  # (px, pz, pth, vx, vz, om)
        self._frames: list[Frame] = []
        self._terminal = True
        self.noisy_goal = Pose2()
        self.true_goal = Pose2()
        self.active_target = Pose2()
        self.target_slot = 0
        self.step_count = 0
        self.success_counter = 0
        self._jam_run = 0
        self.prev_action = np.zeros(3)
        self.last_wrench = (0.0, 0.0, 0.0)

    # -- episode lifecycle -------------------------------------------------

    def seated_pose(self, slot_x: float) -> Pose2:
        """End-effector pose with the plate fully seated at a slot center."""
        go = self.shape.grasp_offset
        com = Pose2(slot_x, self.world.slot_floor_z + self.shape.half_height, 0.0)
        return compose(com, go)

    def _spawn_world(self, target_slot: int) -> WorldGeometry:
        cfg = self.cfg
        if cfg.blocker_mode == "none":
            blocker = None
        elif cfg.blocker_mode == "target":
            blocker = target_slot
        else:
            blocker = int(self._rng.integers(cfg.num_slots))
        if blocker not in self._world_cache:
            self._world_cache[blocker] = spawn_world(
                num_slots=cfg.num_slots,
                slot_pitch=cfg.slot_pitch,
                wall_thickness=cfg.wall_thickness,
                wall_height=cfg.wall_height,
                blocker_slot=blocker,
                blocker_half_extents=cfg.blocker_half_extents,
                plate_thickness=2 * self.shape.half_width,
            )
        return self._world_cache[blocker]

    def reset(
        self,
        seed: int | None = None,
        *,
        iteration: int | None = None,
        noise_fraction: float | None = None,
        target_slot: int | None = None,
        partial_insert: bool | None = None,
        insert_depth: float | None = None,
    ) -> tuple[np.ndarray, dict]:
        cfg = self.cfg
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        if noise_fraction is None:
            noise_fraction = (
                cfg.curriculum.fraction(iteration) if iteration is not None else 1.0
            )
        eps_t = noise_fraction * cfg.eps_trans_max
        eps_r = noise_fraction * cfg.eps_rot_max

        if target_slot is None:
            target_slot = int(self._rng.integers(cfg.num_slots))
        self.target_slot = target_slot
        self.world = self._spawn_world(target_slot)
        self.true_goal = self.seated_pose(self.world.slot_centers_x[target_slot])
        delta = Pose2(
            self._rng.uniform(-eps_t, eps_t),
            self._rng.uniform(-eps_t, eps_t),
            self._rng.uniform(-eps_r, eps_r),
        )
        self.noisy_goal = compose(self.true_goal, delta)

        if partial_insert is None:
            partial_insert = self._rng.uniform() < cfg.partial_insert_prob
        blocked = None if self.world.blocker is None else self._blocked_slot()
        if partial_insert:
            free = [i for i in range(cfg.num_slots) if i != blocked]
            slot = target_slot if target_slot in free else free[int(self._rng.integers(len(free)))]
            u = float(self._rng.uniform()) if insert_depth is None else insert_depth
            depth = self.world.slot_top_z - self.world.slot_floor_z
            bottom = self.world.slot_top_z - u * depth
            com = Pose2(self.world.slot_centers_x[slot], bottom + self.shape.half_height, 0.0)
            pose = compose(com, self.shape.grasp_offset)
        else:
            go = self.shape.grasp_offset
            x = self.noisy_goal.x + self._rng.uniform(-cfg.start_x_halfwidth, cfg.start_x_halfwidth)
            bottom = self.world.slot_top_z + self._rng.uniform(*cfg.start_z_range)
            pose = Pose2(x, bottom + self.shape.half_height + go.z, go.theta)

        self._body = (pose.x, pose.z, pose.theta, 0.0, 0.0, 0.0)
        self.active_target = pose
        self.step_count = 0
        self.success_counter = 0
        self._jam_run = 0
        self.prev_action = np.zeros(3)
        self.last_wrench = (0.0, 0.0, 0.0)
        self._terminal = False
        frame = self._capture_frame()
        self._frames = [frame] * cfg.history
        info = {
            "target_slot": target_slot,
            "blocked_slot": blocked,
            "noise_fraction": noise_fraction,
            "delta": delta.as_tuple(),
            "partial_insert": bool(partial_insert),
        }
        return build_observation(self._frames, cfg), info

    def _blocked_slot(self) -> int | None:
        b = self.world.blocker
        if b is None:
            return None
        dists = [abs(b.cx - c) for c in self.world.slot_centers_x]
        return int(np.argmin(dists))

    @property
    def body_pose(self) -> Pose2:
        return Pose2(self._body[0], self._body[1], self._body[2])

    @property
    def body_twist(self) -> Twist2:
        return Twist2(self._body[3], self._body[4], self._body[5])

    def _capture_frame(self) -> Frame:
        pose = self.body_pose
        rel = relative_pose(self.noisy_goal, pose)
        vx, vz, om = self._body[3], self._body[4], self._body[5]
        # Velocity w.r.t. the (static) goal, expressed in the goal frame.
        gvx, gvz = rotate(-self.noisy_goal.theta, vx, vz)
        return Frame(rel.as_tuple(), self.last_wrench, (gvx, gvz, om))

    def _run_lowlevel(self, n: int, target: Pose2) -> tuple[int, float]:
        """Advance n low-level steps toward target; returns (contact count at
        the final step, peak wrench force norm over the window)."""
        body = self._body
        cfg = self.cfg
        peak = 0.0
        count = 0
        for _ in range(n):
            out = _step_core(
                *body, target.x, target.z, target.theta,
                self.shape, self.world, self.sim_cfg,
            )
            body = out[:6]
            count = out[6]
            self.last_wrench = (out[7], out[8], out[9])
            norm = math.hypot(out[7], out[8])
            peak = max(peak, norm)
            self._jam_run = self._jam_run + 1 if norm > cfg.jam_force else 0
        self._body = body
        return count, peak

    def step(self, action) -> StepResult:
        if self._terminal:
            raise RuntimeError("step() called on a terminal episode; reset first")
        lo, hi = self.cfg.delay_range
        d = int(self._rng.integers(lo, hi + 1))
        return self.step_with_delay(action, d)

    def step_with_delay(self, action, d: int) -> StepResult:
        """One policy step with an explicit inference delay (low-level steps
        spent holding the previous target). step() samples d; open-loop
        replay drives this directly with logged delays."""
        cfg = self.cfg
        action = np.clip(np.asarray(action, dtype=np.float64).reshape(3), -1.0, 1.0)
        peak = 0.0
        count = 0
        if d > 0:
            count, peak = self._run_lowlevel(d, self.active_target)
        self.active_target = compose_target(self.body_pose, self.noisy_goal, action, cfg)
        if cfg.lowlevel_per_policy - d > 0:
            count, p2 = self._run_lowlevel(cfg.lowlevel_per_policy - d, self.active_target)
            peak = max(peak, p2)

        self.step_count += 1
        frame = self._capture_frame()
        self._frames.insert(0, frame)
        del self._frames[cfg.history:]

        _, success, self.success_counter = check_success(
            self.body_pose, self.shape, self.world, self.success_counter, cfg
        )
        jam = self._jam_run >= cfg.jam_hold
        rel_true = relative_pose(self.true_goal, self.body_pose)
        r = reward(rel_true, action, self.prev_action, cfg,
                   success=success, jam=not success and jam)
        self.prev_action = action

        if success:
            terminated = "success"
        elif jam:
            terminated = "jam"
        else:
            terminated = "none"
        truncated = terminated == "none" and self.step_count >= cfg.horizon
        self._terminal = terminated != "none" or truncated

        err_t, err_r = pose_error_norms(rel_true)
        info = {
            "delay": d,
            "contact_count": count,
            "wrench_norm": math.hypot(*self.last_wrench[:2]),
            "peak_wrench": peak,
            "dist_to_goal_trans": err_t,
            "dist_to_goal_rot": err_r,
            "strict_success": bool(
                err_t < cfg.strict_success_trans and err_r < cfg.strict_success_rot
            ),
        }
        return StepResult(
            observation=build_observation(self._frames, cfg),
            reward=r,
            terminated=terminated,
            truncated=truncated,
            info=info,
        )
