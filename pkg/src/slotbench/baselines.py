"""Scripted comparison policies.

Both baselines drive the identical low-level controller through the same
normalized action interface as the learned policy: the desired motion is
expressed in composite-target space and the goal-seeking base term is
subtracted out, so controller dynamics are shared across all policies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .env import EnvConfig, InsertionEnv
from .se2 import wrap_angle

# Commanded straight-down descent per policy step, in meters. At 20 Hz this
# is a 1 m/s target rate, far above the body's impedance-limited maximum
# (~0.01 m per step), so the emitted composite saturates at full scale.
DESCENT_STEP = 0.05
# Contact force that ends a random-search descent, in newtons.
CONTACT_FORCE = 3.0
# Random-search lateral sampling half-range around the noisy target, meters.
SEARCH_HALF_RANGE = 0.025
# Retreat clearance above the slot top, meters.
RETREAT_CLEARANCE = 0.05
# Position tolerance for finishing the retreat/reposition moves, meters.
MOVE_TOL = 0.01


def _base_term(env: InsertionEnv) -> np.ndarray:
    """The goal-seeking base the environment will add to the action."""
    cfg = env.cfg
    cur = env.body_pose
    goal = env.noisy_goal
    return np.array([
        min(1.0, max(-1.0, (goal.x - cur.x) / cfg.action_scale_trans)),
        min(1.0, max(-1.0, (goal.z - cur.z) / cfg.action_scale_trans)),
        min(1.0, max(-1.0, wrap_angle(goal.theta - cur.theta) / cfg.action_scale_rot)),
    ])


def _action_for(env: InsertionEnv, desired: np.ndarray) -> np.ndarray:
    """Action whose composed target realizes the desired normalized motion
    (subtracting the base term; exact whenever the difference fits bounds)."""
    return np.clip(desired - _base_term(env), -1.0, 1.0)


def straight_down_action(env: InsertionEnv) -> np.ndarray:
    """Downward motion at the commanded descent rate, no lateral or
    rotational motion.

    The descent target walks down DESCENT_STEP per step; because the body
    cannot keep up, the outstanding offset grows without bound and the
    normalized command saturates, which is the stateless fixed point.
    """
    rate = DESCENT_STEP / env.cfg.action_scale_trans
    # backlog of an accumulating virtual target always exceeds one step
    desired = np.array([0.0, -max(1.0, rate), 0.0])
    return _action_for(env, desired)


@dataclass
class RandomSearchState:
    phase: str = "descend"  # descend | retreat | reposition
    x_offset: float = 0.0
    retreat_height: float = 0.0

    def __post_init__(self):
        if abs(self.x_offset) > SEARCH_HALF_RANGE:
            raise ValueError("sample point outside the search square")


def random_search_action(
    env: InsertionEnv, rs: RandomSearchState, rng: np.random.Generator
) -> tuple[np.ndarray, RandomSearchState]:
    """Descend until a 3 N contact, retreat above the slots, re-sample a
    lateral offset within +-2.5 cm of the noisy target, repeat."""
    cfg = env.cfg
    cur = env.body_pose
    wrench_norm = math.hypot(env.last_wrench[0], env.last_wrench[1])
    # End-effector height that puts the plate bottom at the retreat clearance.
    go = env.shape.grasp_offset
    retreat_z = (
        env.world.slot_top_z + RETREAT_CLEARANCE + env.shape.half_height + go.z
    )

    if rs.phase == "descend":
        if wrench_norm >= CONTACT_FORCE:
            rs = replace(rs, phase="retreat", retreat_height=retreat_z)
        else:
            return straight_down_action(env), rs

    if rs.phase == "retreat":
        if cur.z >= rs.retreat_height - MOVE_TOL:
            offset = float(rng.uniform(-SEARCH_HALF_RANGE, SEARCH_HALF_RANGE))
            rs = replace(rs, phase="reposition", x_offset=offset)
        else:
            dz = min(1.0, (rs.retreat_height - cur.z) / cfg.action_scale_trans)
            return _action_for(env, np.array([0.0, dz, 0.0])), rs

    # reposition: move laterally toward the sampled point at retreat height
    target_x = env.noisy_goal.x + rs.x_offset
    if abs(cur.x - target_x) < MOVE_TOL:
        rs = replace(rs, phase="descend")
        return straight_down_action(env), rs
    dx = np.clip((target_x - cur.x) / cfg.action_scale_trans, -1.0, 1.0)
    dz = np.clip((retreat_z - cur.z) / cfg.action_scale_trans, -1.0, 1.0)
    return _action_for(env, np.array([dx, dz, 0.0])), rs


class BaselinePolicy:
    """Uniform callable wrapper: policy(obs, env) -> action."""

    def __init__(self, name: str, seed: int | None = None):
        if name not in ("straight-down", "random-search"):
            raise ValueError(f"unknown baseline {name!r}")
        self.name = name
        self._rng = np.random.default_rng(seed)
        self._rs = RandomSearchState()

    def reset(self, seed: int | None = None) -> None:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._rs = RandomSearchState()

    def __call__(self, observation, env: InsertionEnv) -> np.ndarray:
        if self.name == "straight-down":
            return straight_down_action(env)
        action, self._rs = random_search_action(env, self._rs, self._rng)
        return action
