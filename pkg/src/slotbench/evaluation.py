"""Evaluation protocol, episode logging, open-loop replay, and ablations.

The protocol mirrors the paper-style report: a fixed number of trials per
slot, success rate computed per trial index across slots, and the mean and
sample standard deviation over trial indices. Episode logs are JSON-lines
with a header record carrying the fully resolved configuration and enough
initial state to replay the episode open-loop through the simulator.
"""

from __future__ import annotations

import dataclasses
import json
import math
import subprocess
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import BaselinePolicy
from .env import Curriculum, EnvConfig, InsertionEnv
from .sac import SACConfig, load_policy, observation_scale, save_train_state, train_loop
from .se2 import Pose2
from .sim import PlateShape, SimConfig

BASELINE_NAMES = ("straight-down", "random-search")

# Variant fields that change the observation vector itself; these must be
# carried over to the evaluation environment so the policy's input matches.
OBS_FIELDS = ("history", "include_velocity")

_BUILD_ID = None


def build_id() -> str:
    """Git commit of the working tree when available, else 'unknown'."""
    global _BUILD_ID
    if _BUILD_ID is None:
        try:
            out = subprocess.run(
                ["git", "rev-parse", "--short", "HEAD"],
                capture_output=True, text=True, timeout=5,
            )
            _BUILD_ID = out.stdout.strip() if out.returncode == 0 else "unknown"
        except (OSError, subprocess.SubprocessError):
            _BUILD_ID = "unknown"
    return _BUILD_ID


def _jsonl(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def config_snapshot(env_cfg: EnvConfig, sim_cfg: SimConfig, shape: PlateShape) -> dict:
    """Fully resolved configuration in SI units, JSON-ready."""
    def as_dict(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, Curriculum):
                v = [list(b) for b in v.breakpoints]
            elif isinstance(v, Pose2):
                v = list(v.as_tuple())
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    return {
        "environment": as_dict(env_cfg),
        "simulator": as_dict(sim_cfg),
        "plate": as_dict(shape),
    }


@dataclass(frozen=True)
class EvalProtocol:
    slots: tuple[int, ...] = (0, 1, 2)
    trials_per_slot: int = 4
    blocker: int | str | None = None  # None, a fixed slot index, or "target"
    policy: str = "straight-down"  # checkpoint path or baseline name
    seed: int = 0
    noise_fraction: float = 1.0

    def __post_init__(self):
        if self.trials_per_slot < 1:
            raise ValueError("trials_per_slot must be >= 1")


@dataclass
class EpisodeRecord:
    slot: int
    trial: int
    outcome: str  # success | jam | horizon
    steps: int
    peak_wrench: float
    episode_return: float
    seed: int


@dataclass
class EvalReport:
    episodes: list[EpisodeRecord]
    per_trial_rates: list[float]
    success_mean: float
    success_std: float
    protocol: EvalProtocol
    config: dict
    build: str = field(default_factory=build_id)

    def to_json(self) -> str:
        d = {
            "build": self.build,
            "protocol": dataclasses.asdict(self.protocol),
            "config": self.config,
            "per_trial_rates": self.per_trial_rates,
            "success_mean": self.success_mean,
            "success_std": self.success_std,
            "episodes": [dataclasses.asdict(e) for e in self.episodes],
        }
        return json.dumps(d, sort_keys=True, indent=2)


def aggregate_success(
    episodes: list[EpisodeRecord], slots, trials_per_slot: int
) -> tuple[list[float], float, float]:
    """Success rate per trial index across slots; mean and sample std over
    trial indices (std 0 for a single trial)."""
    rates = []
    for t in range(trials_per_slot):
        hits = [1.0 if e.outcome == "success" else 0.0
                for e in episodes if e.trial == t]
        if len(hits) != len(slots):
            raise ValueError(f"trial {t}: expected {len(slots)} episodes, got {len(hits)}")
        rates.append(float(np.mean(hits)))
    mean = float(np.mean(rates))
    std = float(np.std(rates, ddof=1)) if len(rates) > 1 else 0.0
    return rates, mean, std


def resolve_policy(protocol: EvalProtocol, env_cfg: EnvConfig, policy=None):
    """Policy callable (obs, env) -> action, deterministic for checkpoints."""
    if policy is not None:
        return policy
    if protocol.policy in BASELINE_NAMES:
        return BaselinePolicy(protocol.policy, seed=protocol.seed)
    actor, scale, meta = load_policy(protocol.policy)
    if meta["obs_dim"] != env_cfg.obs_dim:
        raise ValueError(
            f"checkpoint observation width {meta['obs_dim']} does not match "
            f"environment width {env_cfg.obs_dim}"
        )
    def act(obs, env):
        return actor.mean_action(np.asarray(obs) * scale)
    return act


def _blocker_mode(protocol: EvalProtocol) -> str:
    if protocol.blocker is None:
        return "none"
    if protocol.blocker == "target":
        return "target"
    return "fixed"


def rollout_episode(
    env: InsertionEnv,
    policy,
    *,
    slot: int,
    trial: int,
    seed: int,
    noise_fraction: float,
    log_lines: list[str] | None = None,
    snapshot: dict | None = None,
) -> EpisodeRecord:
    """One evaluation episode; optionally appends JSONL records."""
    obs, info = env.reset(
        seed=seed, noise_fraction=noise_fraction, target_slot=slot,
        partial_insert=False,
    )
    if hasattr(policy, "reset"):
        policy.reset()
    if log_lines is not None:
        log_lines.append(_jsonl({
            "type": "header",
            "episode": {"slot": slot, "trial": trial, "seed": seed},
            "build": build_id(),
            "config": snapshot or {},
            "noise_fraction": noise_fraction,
            "init": {
                "pose": list(env.body_pose.as_tuple()),
                "noisy_goal": list(env.noisy_goal.as_tuple()),
                "true_goal": list(env.true_goal.as_tuple()),
                "target_slot": info["target_slot"],
                "blocked_slot": info["blocked_slot"],
            },
        }))
    total = 0.0
    peak = 0.0
    outcome = "horizon"
    steps = 0
    for i in range(env.cfg.horizon):
        action = policy(obs, env)
        res = env.step(action)
        obs = res.observation
        total += res.reward
        peak = max(peak, res.info["peak_wrench"])
        steps = i + 1
        if log_lines is not None:
            log_lines.append(_jsonl({
                "type": "step",
                "step": i,
                "action": [float(a) for a in np.clip(np.asarray(action, dtype=float).reshape(3), -1, 1)],
                "delay": res.info["delay"],
                "pose": list(env.body_pose.as_tuple()),
                "target": list(env.active_target.as_tuple()),
                "wrench": [float(w) for w in env.last_wrench],
                "reward": res.reward,
                "success_counter": env.success_counter,
                "jam_run": env._jam_run,
            }))
        if res.terminated != "none":
            outcome = res.terminated
            break
        if res.truncated:
            outcome = "horizon"
            break
    return EpisodeRecord(slot, trial, outcome, steps, peak, total, seed)


def run_evaluation(
    protocol: EvalProtocol,
    env_cfg: EnvConfig | None = None,
    sim_cfg: SimConfig | None = None,
    shape: PlateShape | None = None,
    out_dir=None,
    policy=None,
) -> EvalReport:
    """Run the trials-per-slot protocol and aggregate the Table-style stats."""
    env_cfg = env_cfg if env_cfg is not None else EnvConfig()
    sim_cfg = sim_cfg if sim_cfg is not None else SimConfig()
    shape = shape if shape is not None else PlateShape()

    mode = _blocker_mode(protocol)
    run_cfg = replace(env_cfg, blocker_mode="target" if mode == "target" else "none")
    env = InsertionEnv(run_cfg, sim_cfg, shape)
    if mode == "fixed":
        # a fixed blocked slot regardless of the commanded slot
        env.cfg = replace(run_cfg, blocker_mode="target")
        env.world = None

    policy_fn = resolve_policy(protocol, env_cfg, policy)
    snapshot = config_snapshot(env_cfg, sim_cfg, shape)
    log_lines: list[str] | None = [] if out_dir is not None else None

    episodes = []
    for trial in range(protocol.trials_per_slot):
        for slot in protocol.slots:
            seed = int(
                np.random.SeedSequence(protocol.seed, spawn_key=(slot, trial))
                .generate_state(1)[0]
            )
            if mode == "fixed":
                env.cfg = replace(run_cfg, blocker_mode="none")
                # force the blocker into the fixed slot by spawning directly
                env._world_cache = {}
                env.cfg = replace(run_cfg, blocker_mode="target")
                record = rollout_episode(
                    env, policy_fn, slot=int(protocol.blocker), trial=trial,
                    seed=seed, noise_fraction=protocol.noise_fraction,
                    log_lines=log_lines, snapshot=snapshot,
                )
                record.slot = slot
            else:
                record = rollout_episode(
                    env, policy_fn, slot=slot, trial=trial, seed=seed,
                    noise_fraction=protocol.noise_fraction,
                    log_lines=log_lines, snapshot=snapshot,
                )
            episodes.append(record)

    rates, mean, std = aggregate_success(episodes, protocol.slots, protocol.trials_per_slot)
    report = EvalReport(episodes, rates, mean, std, protocol, snapshot)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "episodes.jsonl").write_text("\n".join(log_lines) + "\n" if log_lines else "")
    return report


# -- open-loop replay --------------------------------------------------------


def read_episode_log(path) -> list[list[dict]]:
    """Parse a JSONL log into episodes: each a [header, step, step, ...] list."""
    episodes = []
    current: list[dict] | None = None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec["type"] == "header":
                current = [rec]
                episodes.append(current)
            elif current is None:
                raise ValueError("step record before any header")
            else:
                current.append(rec)
    return episodes


def restore_env(header: dict, env_cfg: EnvConfig, sim_cfg: SimConfig, shape: PlateShape) -> InsertionEnv:
    """Rebuild an environment in the exact post-reset state of a logged episode."""
    init = header["init"]
    blocked = init["blocked_slot"]
    cfg = replace(env_cfg, blocker_mode="none" if blocked is None else "target")
    env = InsertionEnv(cfg, sim_cfg, shape)
    env.reset(
        seed=0, noise_fraction=0.0,
        target_slot=blocked if blocked is not None else init["target_slot"],
        partial_insert=False,
    )
    env.target_slot = init["target_slot"]
    env.true_goal = Pose2(*init["true_goal"])
    env.noisy_goal = Pose2(*init["noisy_goal"])
    pose = Pose2(*init["pose"])
    env._body = (pose.x, pose.z, pose.theta, 0.0, 0.0, 0.0)
    env.active_target = pose
    env.step_count = 0
    env.success_counter = 0
    env._jam_run = 0
    env.prev_action = np.zeros(3)
    env.last_wrench = (0.0, 0.0, 0.0)
    env._terminal = False
    env._frames = [env._capture_frame()] * cfg.history
    return env


def replay_episode(
    episode: list[dict],
    env_cfg: EnvConfig,
    sim_cfg: SimConfig | None = None,
    shape: PlateShape | None = None,
) -> tuple[float, list[tuple[float, float, float]]]:
    """Re-run logged actions open-loop with the logged delays; returns the
    max per-component pose deviation from the log and the replayed poses."""
    sim_cfg = sim_cfg if sim_cfg is not None else SimConfig()
    shape = shape if shape is not None else PlateShape()
    header, steps = episode[0], episode[1:]
    env = restore_env(header, env_cfg, sim_cfg, shape)
    worst = 0.0
    poses = []
    for rec in steps:
        env.step_with_delay(np.array(rec["action"]), rec["delay"])
        got = env.body_pose.as_tuple()
        poses.append(got)
        want = tuple(rec["pose"])
        worst = max(worst, max(abs(g - w) for g, w in zip(got, want)))
    return worst, poses


# -- ablations ----------------------------------------------------------------


@dataclass(frozen=True)
class AblationVariant:
    name: str
    env_overrides: dict = field(default_factory=dict)


def default_ablation_grid() -> list[AblationVariant]:
    return [
        AblationVariant("full"),
        AblationVariant("H1", {"history": 1}),
        AblationVariant("H16", {"history": 16}),
        AblationVariant("velocity-obs", {"include_velocity": True}),
        AblationVariant("no-delay", {"delay_range": (0, 0)}),
        AblationVariant("no-noise", {"eps_trans_max": 0.0, "eps_rot_max": 0.0}),
    ]


def run_ablation(
    variants: list[AblationVariant],
    base_env_cfg: EnvConfig,
    sac_cfg: SACConfig,
    protocol: EvalProtocol,
    seed: int = 0,
    train_seeds: int = 3,
    sim_cfg: SimConfig | None = None,
    shape: PlateShape | None = None,
    out_dir=None,
    callback=None,
) -> list[dict]:
    """Train and evaluate every variant; one result row per variant.

    All variants are evaluated under the same full-noise, full-delay
    conditions (observation-shaping overrides carry over, training-only
    randomization overrides do not). Rows are independent: each derives its
    seeds from (seed, variant name) alone, and a failing row is recorded
    and skipped without aborting the grid.
    """
    sim_cfg = sim_cfg if sim_cfg is not None else SimConfig()
    shape = shape if shape is not None else PlateShape()
    rows = []
    for variant in variants:
        train_cfg = replace(base_env_cfg, **variant.env_overrides)
        eval_overrides = {k: v for k, v in variant.env_overrides.items() if k in OBS_FIELDS}
        eval_cfg = replace(base_env_cfg, **eval_overrides)
        row = {"variant": variant.name, "seed_means": [], "error": None}
        try:
            for k in range(train_seeds):
                row_seed = int(
                    np.random.SeedSequence(seed, spawn_key=(hash(variant.name) & 0xFFFF, k))
                    .generate_state(1)[0]
                )
                def factory(seed=None, _cfg=train_cfg):
                    return InsertionEnv(_cfg, sim_cfg, shape, seed=seed)
                state, metrics = train_loop(factory, sac_cfg, row_seed, callback=callback)
                policy = _state_policy(state)
                report = run_evaluation(
                    replace(protocol, seed=row_seed), eval_cfg, sim_cfg, shape,
                    policy=policy,
                )
                row["seed_means"].append(report.success_mean)
                if out_dir is not None:
                    out = Path(out_dir)
                    out.mkdir(parents=True, exist_ok=True)
                    save_train_state(
                        out / f"{variant.name}_seed{k}.ckpt", state,
                        {"variant": variant.name, "row_seed": row_seed},
                    )
            row["mean"] = float(np.mean(row["seed_means"]))
            row["std"] = float(np.std(row["seed_means"], ddof=1)) if train_seeds > 1 else 0.0
        except Exception as exc:  # keep the grid going; record the failure
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return rows


def _state_policy(state):
    def act(obs, env):
        return state.act_mean(np.asarray(obs))
    return act
