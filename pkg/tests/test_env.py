import math

import numpy as np
import pytest

from slotbench.env import (
    Curriculum,
    EnvConfig,
    Frame,
    InsertionEnv,
    build_observation,
    check_failure,
    check_success,
    compose_target,
    curriculum_epsilon,
    default_curriculum,
    reward,
)
from slotbench.se2 import Pose2, compose, inverse, relative_pose
from slotbench.sim import PlateShape, spawn_world

R_TIME = -1.0 / 128.0


class TestCurriculum:
    CFG = EnvConfig(curriculum=Curriculum(((0, 0.0), (1000, 1.0))))

    def test_zero_at_start(self):
        assert curriculum_epsilon(0, self.CFG.curriculum, self.CFG) == (0.0, 0.0)

    def test_full_after_ramp(self):
        et, er = curriculum_epsilon(1000, self.CFG.curriculum, self.CFG)
        assert et == pytest.approx(0.05)
        assert er == pytest.approx(math.radians(5.0))
        assert curriculum_epsilon(99999, self.CFG.curriculum, self.CFG) == (et, er)

    def test_midpoint_interpolation(self):
        et, er = curriculum_epsilon(500, self.CFG.curriculum, self.CFG)
        assert et == pytest.approx(0.025)
        assert er == pytest.approx(math.radians(2.5))

    def test_validation(self):
        with pytest.raises(ValueError):
            Curriculum(((0, 0.0), (0, 1.0)))
        with pytest.raises(ValueError):
            Curriculum(((0, 0.0), (10, 0.5)))  # final fraction != 1
        with pytest.raises(ValueError):
            curriculum_epsilon(-1, self.CFG.curriculum, self.CFG)


class TestReset:
    def test_full_insert_starts_at_true_goal(self):
        env = InsertionEnv(EnvConfig(), seed=5)
        obs, info = env.reset(
            noise_fraction=1.0, target_slot=1, partial_insert=True, insert_depth=1.0
        )
        assert env.body_pose.as_tuple() == env.true_goal.as_tuple()
        # first frame's rel_pose is the true goal seen from the noisy goal
        expected = relative_pose(env.noisy_goal, env.true_goal)
        np.testing.assert_allclose(obs[:3], expected.as_tuple(), atol=1e-15)
        # which equals the inverse of the drawn noise offset
        delta_inv = inverse(Pose2(*info["delta"]))
        np.testing.assert_allclose(obs[:3], delta_inv.as_tuple(), atol=1e-12)

    def test_zero_noise_goals_coincide(self):
        env = InsertionEnv(EnvConfig(), seed=5)
        env.reset(noise_fraction=0.0, target_slot=0)
        assert env.noisy_goal.as_tuple() == env.true_goal.as_tuple()

    def test_noise_statistics(self):
        env = InsertionEnv(EnvConfig(), seed=7)
        deltas = []
        for _ in range(10_000):
            _, info = env.reset(noise_fraction=1.0, partial_insert=False)
            deltas.append(info["delta"])
        deltas = np.array(deltas)
        for axis, eps in ((0, 0.05), (1, 0.05), (2, math.radians(5))):
            col = deltas[:, axis]
            assert abs(col.mean()) < 0.005
            assert col.min() >= -eps and col.max() <= eps
            assert (col > 0).any() and (col < 0).any()

    def test_start_region_is_contact_free(self):
        env = InsertionEnv(EnvConfig(), seed=11)
        for _ in range(200):
            obs, _ = env.reset(noise_fraction=1.0, partial_insert=False)
            assert np.all(obs[3:6] == 0.0)  # no initial contact wrench


class TestComposeTarget:
    CFG = EnvConfig()

    def test_at_goal_zero_action(self):
        p = Pose2(0.02, 0.2, 0.1)
        t = compose_target(p, p, np.zeros(3), self.CFG)
        assert t.as_tuple() == pytest.approx(p.as_tuple(), abs=1e-15)

    def test_base_saturates(self):
        cur = Pose2(0.0, 1.0, 0.0)
        goal = Pose2(0.0, 0.1, 0.0)  # 0.9 m below
        t = compose_target(cur, goal, np.zeros(3), self.CFG)
        assert t.z == pytest.approx(1.0 - 0.45, abs=1e-15)

    def test_action_cancels_base(self):
        cur = Pose2(0.0, 1.0, 0.0)
        goal = Pose2(0.0, 0.1, 0.0)
        t = compose_target(cur, goal, np.array([0.0, 1.0, 0.0]), self.CFG)
        assert t.z == pytest.approx(1.0, abs=1e-15)


class TestReward:
    CFG = EnvConfig()

    def test_success_at_goal(self):
        r = reward(Pose2(), np.zeros(3), np.zeros(3), self.CFG, success=True)
        assert r == pytest.approx(0.5 - 1.0 / 128.0, abs=1e-12)
        assert r == pytest.approx(0.4921875, abs=1e-12)

    def test_distance_term(self):
        r = reward(Pose2(0.0, 0.10, 0.0), np.zeros(3), np.zeros(3), self.CFG)
        assert r == pytest.approx(-1.0 / 128.0 - 8.59e-3 * 0.10, abs=1e-12)
        assert r == pytest.approx(-0.0086715, abs=1e-12)

    def test_distance_cutoff(self):
        r = reward(Pose2(2.0, 0.0, 0.0), np.zeros(3), np.zeros(3), self.CFG)
        assert r == pytest.approx(-1.0 / 128.0 - 8.59e-3 * 0.5, abs=1e-12)

    def test_jam_penalty_included(self):
        r_base = reward(Pose2(), np.zeros(3), np.zeros(3), self.CFG)
        r_jam = reward(Pose2(), np.zeros(3), np.zeros(3), self.CFG, jam=True)
        assert r_jam - r_base == pytest.approx(-1.1, abs=1e-12)

    def test_bounds_over_random_steps(self):
        rng = np.random.default_rng(0)
        lo = (
            -1.0 / 128.0
            - 8.59e-3 * 0.5
            - 8.21e-3 * math.radians(30)
            - 8.59e-3 * 0.5
            - 8.21e-3 * math.radians(30)
        )
        for _ in range(10_000):
            rel = Pose2(*rng.uniform(-3, 3, 2), rng.uniform(-math.pi, math.pi))
            a = rng.uniform(-1, 1, 3)
            p = rng.uniform(-1, 1, 3)
            r = reward(rel, a, p, self.CFG)
            assert lo - 1e-12 <= r <= -1.0 / 128.0 + 1e-12


class TestCheckSuccess:
    def test_hold_in_true_slot(self):
        env = InsertionEnv(EnvConfig(), seed=1)
        env.reset(noise_fraction=0.0, target_slot=1, partial_insert=True, insert_depth=1.0)
        counter = 0
        success = False
        for i in range(10):
            _, success, counter = check_success(
                env.body_pose, env.shape, env.world, counter, env.cfg
            )
            assert success == (i == 9)
        assert success

    def test_counter_resets_on_exit(self):
        cfg = EnvConfig()
        shape = PlateShape()
        world = spawn_world()
        seated = compose(Pose2(0.0, world.slot_floor_z + shape.half_height, 0.0),
                         shape.grasp_offset)
        outside = Pose2(seated.x, seated.z + 0.2, seated.theta)
        counter = 0
        for _ in range(9):
            _, success, counter = check_success(seated, shape, world, counter, cfg)
            assert not success
        in_region, success, counter = check_success(outside, shape, world, counter, cfg)
        assert not in_region and not success and counter == 0

    def test_neighboring_slot_counts(self):
        cfg = EnvConfig()
        shape = PlateShape()
        world = spawn_world()
        neighbor = compose(Pose2(world.slot_centers_x[2],
                                 world.slot_floor_z + shape.half_height, 0.0),
                           shape.grasp_offset)
        counter = 0
        for i in range(10):
            _, success, counter = check_success(neighbor, shape, world, counter, cfg)
        assert success


class TestCheckFailure:
    CFG = EnvConfig()

    def test_horizon(self):
        assert check_failure([0.0] * 100, 128, self.CFG) == "horizon"

    def test_sustained_jam(self):
        assert check_failure([60.0] * 200, 5, self.CFG) == "jam"

    def test_interrupted_run_is_not_jam(self):
        assert check_failure([60.0] * 100 + [0.0], 5, self.CFG) == "none"


class TestBuildObservation:
    def test_single_frame_history(self):
        cfg = EnvConfig(history=1)
        f = Frame((1, 2, 3), (4, 5, 6), (7, 8, 9))
        np.testing.assert_array_equal(build_observation([f], cfg), [1, 2, 3, 4, 5, 6])

    def test_reset_fills_history(self):
        env = InsertionEnv(EnvConfig(), seed=2)
        obs, _ = env.reset()
        frames = obs.reshape(8, 6)
        for i in range(1, 8):
            np.testing.assert_array_equal(frames[i], frames[0])

    def test_padding_after_two_steps(self):
        env = InsertionEnv(EnvConfig(delay_range=(0, 0)), seed=2)
        obs0, _ = env.reset(partial_insert=True, insert_depth=0.5, noise_fraction=0.0)
        f0 = obs0[:6]
        r1 = env.step(np.array([0.1, 0.0, 0.0]))
        r2 = env.step(np.array([0.0, 0.1, 0.0]))
        frames = r2.observation.reshape(8, 6)
        f1 = r1.observation[:6]
        f2 = r2.observation[:6]
        np.testing.assert_array_equal(frames[0], f2)
        np.testing.assert_array_equal(frames[1], f1)
        for i in range(2, 8):
            np.testing.assert_array_equal(frames[i], f0)

    def test_velocity_flag_widens_frames(self):
        cfg = EnvConfig(include_velocity=True)
        assert cfg.obs_dim == 9 * 8
        env = InsertionEnv(cfg, seed=3)
        obs, _ = env.reset()
        assert obs.shape == (72,)


class TestStep:
    def test_equilibrium_at_goal(self):
        cfg = EnvConfig(delay_range=(0, 0))
        env = InsertionEnv(cfg, seed=4)
        env.reset(noise_fraction=0.0, target_slot=1, partial_insert=True, insert_depth=1.0)
        for _ in range(5):
            res = env.step(np.zeros(3))
            if res.terminated != "none":
                break
            err = math.hypot(*res.observation[:2])
            assert err < 1e-3
            assert res.reward == pytest.approx(R_TIME, abs=2e-5)

    def test_deterministic_given_seed(self):
        def rollout():
            env = InsertionEnv(EnvConfig(), seed=123)
            env.reset()
            rng = np.random.default_rng(9)
            out = []
            for _ in range(40):
                res = env.step(rng.uniform(-1, 1, 3))
                out.append((res.observation.tobytes(), res.reward,
                            res.terminated, res.truncated))
                if res.terminated != "none" or res.truncated:
                    env.reset()
            return out

        assert rollout() == rollout()

    def test_delay_changes_trajectory(self):
        def run(delay):
            env = InsertionEnv(EnvConfig(delay_range=delay), seed=77)
            env.reset(partial_insert=False, noise_fraction=0.0)
            poses = []
            for i in range(5):
                env.step(np.array([0.8 if i % 2 else -0.8, 0.5, 0.0]))
                poses.append(env.body_pose.as_tuple())
            return np.array(poses)

        a = run((0, 0))
        b = run((13, 13))
        assert np.abs(a[:, :2] - b[:, :2]).max() > 0.001

    def test_step_after_terminal_rejected(self):
        env = InsertionEnv(EnvConfig(), seed=8)
        env.reset(noise_fraction=0.0, target_slot=1, partial_insert=True, insert_depth=1.0)
        for _ in range(200):
            res = env.step(np.zeros(3))
            if res.terminated != "none" or res.truncated:
                break
        with pytest.raises(RuntimeError):
            env.step(np.zeros(3))

    def test_observation_length_constant(self):
        env = InsertionEnv(EnvConfig(), seed=6)
        obs, _ = env.reset()
        dims = {obs.shape}
        for _ in range(30):
            res = env.step(np.zeros(3))
            dims.add(res.observation.shape)
            if res.terminated != "none" or res.truncated:
                obs, _ = env.reset()
                dims.add(obs.shape)
        assert dims == {(48,)}


class TestEnvInvariants:
    def test_seated_zero_action_succeeds_quickly(self):
        wins = 0
        for seed in range(100):
            env = InsertionEnv(EnvConfig(), seed=seed)
            env.reset(noise_fraction=0.0, partial_insert=True, insert_depth=1.0)
            for i in range(env.cfg.success_hold + 2):
                res = env.step(np.zeros(3))
                if res.terminated == "success":
                    wins += 1
                    break
        assert wins >= 99

    def test_noise_sign_coverage(self):
        env = InsertionEnv(EnvConfig(), seed=21)
        deltas = np.array(
            [env.reset(noise_fraction=1.0)[1]["delta"] for _ in range(1000)]
        )
        for axis in range(3):
            assert (deltas[:, axis] > 0).any()
            assert (deltas[:, axis] < 0).any()

    def test_noisy_vs_true_goal_relation(self):
        env = InsertionEnv(EnvConfig(), seed=31)
        for _ in range(100):
            _, info = env.reset(noise_fraction=1.0)
            delta = Pose2(*info["delta"])
            rel_noisy = relative_pose(env.noisy_goal, env.body_pose)
            rel_true = relative_pose(env.true_goal, env.body_pose)
            expected = compose(delta, rel_noisy)
            np.testing.assert_allclose(
                rel_true.as_tuple(), expected.as_tuple(), atol=1e-12
            )

    def test_jam_termination_with_real_dynamics(self):
        # Pressing straight down onto a blocker sustains ~3.4 N (the press
        # ceiling is kp*err_scale*action_scale); a 3 N jam threshold must
        # trip after jam_hold consecutive low-level steps and pay r_drop.
        cfg = EnvConfig(delay_range=(0, 0), blocker_mode="target", jam_force=3.0)
        env = InsertionEnv(cfg, seed=13)
        env.reset(noise_fraction=0.0, target_slot=1, partial_insert=False)
        outcome = None
        for _ in range(cfg.horizon):
            res = env.step(np.array([0.0, -1.0, 0.0]))
            if res.terminated != "none" or res.truncated:
                outcome = res
                break
        assert outcome is not None and outcome.terminated == "jam"
        assert outcome.reward < -1.0  # includes the drop penalty


class TestBlocker:
    def test_blocked_slot_is_unwinnable_geometry(self):
        cfg = EnvConfig(blocker_mode="target")
        env = InsertionEnv(cfg, seed=2)
        env.reset(target_slot=1, noise_fraction=0.0)
        b = env.world.blocker
        assert b is not None
        opening = cfg.slot_pitch - cfg.wall_thickness
        side_gap = (opening - 2 * b.hx) / 2
        assert side_gap < 2 * env.shape.half_width  # plate cannot squeeze past
        # plate resting on the blocker cannot reach the success height
        assert b.cz + b.hz > env.world.slot_top_z - cfg.success_depth

    def test_partial_insert_avoids_blocked_slot(self):
        cfg = EnvConfig(blocker_mode="target")
        env = InsertionEnv(cfg, seed=3)
        for _ in range(50):
            _, info = env.reset(target_slot=1, partial_insert=True)
            _, cx = (env.body_pose, None)
            from slotbench.env import plate_bottom_and_center

            bottom, cx = plate_bottom_and_center(env.body_pose, env.shape)
            nearest = int(np.argmin([abs(cx - c) for c in env.world.slot_centers_x]))
            assert nearest != info["blocked_slot"]
