"""Soft Actor-Critic on the numpy network core.

Twin Q critics with a min backup, Polyak-averaged targets, a learned
entropy temperature, a FIFO uniform replay buffer, and the collect/update
training loop. Workers are realized as independent environment instances
stepped round-robin through a single serialized hand-off point, which
keeps multi-worker runs exactly reproducible from the master seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import EnvConfig
from .nets import (
    ActorNet,
    CriticNet,
    ParamStore,
    adam_update,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
)

DONE_KINDS = ("none", "terminal", "truncated")


@dataclass(frozen=True)
class Transition:
    observation: np.ndarray
    action: np.ndarray
    reward: float
    next_observation: np.ndarray
    done_kind: str

    def __post_init__(self):
        if self.done_kind not in DONE_KINDS:
            raise ValueError(f"bad done_kind {self.done_kind!r}")
        if self.observation.shape != self.next_observation.shape:
            raise ValueError("observation widths differ")


class ReplayBuffer:
    """Preallocated FIFO ring with uniform i.i.d. sampling."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, action_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.terminal = np.zeros(capacity)  # 1.0 only for true terminal states
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, obs, action, reward, next_obs, done_kind: str) -> None:
        if done_kind not in DONE_KINDS:
            raise ValueError(f"bad done_kind {done_kind!r}")
        i = self.cursor
        self.obs[i] = obs
        self.act[i] = action
        self.rew[i] = reward
        self.next_obs[i] = next_obs
        self.terminal[i] = 1.0 if done_kind == "terminal" else 0.0
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_transition(self, t: Transition) -> None:
        self.push(t.observation, t.action, t.reward, t.next_observation, t.done_kind)

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        # Sampling is i.i.d. with replacement, so any non-empty buffer can
        # serve a batch (a single-element buffer yields n copies).
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        return {
            "obs": self.obs[idx],
            "act": self.act[idx],
            "rew": self.rew[idx],
            "next_obs": self.next_obs[idx],
            "terminal": self.terminal[idx],
        }


@dataclass(frozen=True)
class SACConfig:
    batch_size: int = 256
    gamma: float = 0.99
    lr: float = 3e-4
    initial_alpha: float = math.e
    learn_alpha: bool = True
    target_entropy: float | None = None  # default: -action_dim
    polyak_tau: float = 0.005
    updates_per_iteration: int = 50
    env_steps_per_iteration: int = 140
    iterations: int = 5000
    prefill_steps: int = 5000
    workers: int = 4
    replay_capacity: int = 262_144
    hidden: tuple[int, ...] = (256, 256)
    twin_critics: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.polyak_tau <= 1.0:
            raise ValueError("polyak_tau must lie in (0, 1]")
        if self.batch_size > self.prefill_steps:
            raise ValueError("prefill must cover at least one batch")

    def resolved_target_entropy(self, action_dim: int) -> float:
        return -float(action_dim) if self.target_entropy is None else self.target_entropy


def observation_scale(env_cfg: EnvConfig) -> np.ndarray:
    """Fixed diagonal feature scaling applied to observations before the
    networks (raw frames mix meters, radians, and newtons)."""
    per_frame = [10.0, 10.0, 2.0, 0.1, 0.1, 1.0]
    if env_cfg.include_velocity:
        per_frame += [5.0, 5.0, 0.5]
    return np.tile(np.array(per_frame), env_cfg.history)


@dataclass
class TrainState:
    actor: ActorNet
    critic1: CriticNet
    critic2: CriticNet
    target1: dict[str, np.ndarray]
    target2: dict[str, np.ndarray]
    log_alpha: ParamStore
    obs_scale: np.ndarray
    action_dim: int
    rng: np.random.Generator
    iteration: int = 0
    env_steps: int = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.params["log_alpha"][0]))

    def scaled(self, obs: np.ndarray) -> np.ndarray:
        return np.asarray(obs) * self.obs_scale

    def act_stochastic(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noise = rng.normal(size=(1, self.action_dim))
        action, _, _ = self.actor.sample(self.scaled(obs)[None, :], noise)
        return action[0]

    def act_mean(self, obs: np.ndarray) -> np.ndarray:
        return np.asarray(self.actor.mean_action(self.scaled(obs)))


def init_train_state(
    obs_dim: int,
    action_dim: int,
    cfg: SACConfig,
    seed: int,
    obs_scale: np.ndarray | None = None,
) -> TrainState:
    ss = np.random.SeedSequence(seed)
    net_rng, train_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    actor = ActorNet(obs_dim, action_dim, cfg.hidden, net_rng)
    critic1 = CriticNet(obs_dim, action_dim, cfg.hidden, net_rng)
    critic2 = CriticNet(obs_dim, action_dim, cfg.hidden, net_rng)
    return TrainState(
        actor=actor,
        critic1=critic1,
        critic2=critic2,
        target1={n: p.copy() for n, p in critic1.store.params.items()},
        target2={n: p.copy() for n, p in critic2.store.params.items()},
        log_alpha=ParamStore(
            {"log_alpha": np.array(
                [math.log(cfg.initial_alpha) if cfg.initial_alpha > 0 else -math.inf]
            )}
        ),
        obs_scale=np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale),
        action_dim=action_dim,
        rng=train_rng,
    )


def _assert_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise FloatingPointError(f"{name} produced a non-finite value: {v}")


def critic_update(state: TrainState, batch: dict, cfg: SACConfig) -> float:
    """One Adam step on both critics toward the SAC target
    y = r + gamma * (1 - terminal) * (min Q_target(s', a') - alpha*logpi)."""
    obs = state.scaled(batch["obs"])
    next_obs = state.scaled(batch["next_obs"])
    n = obs.shape[0]

    noise = state.rng.normal(size=(n, state.action_dim))
    a2, logp2, _ = state.actor.sample(next_obs, noise)
    x2 = np.concatenate([next_obs, a2], axis=1)
    q1t, _ = mlp_forward(state.critic1.spec, state.target1, x2)
    if cfg.twin_critics:
        q2t, _ = mlp_forward(state.critic2.spec, state.target2, x2)
        qt = np.minimum(q1t[:, 0], q2t[:, 0])
    else:
        qt = q1t[:, 0]
    y = batch["rew"] + cfg.gamma * (1.0 - batch["terminal"]) * (qt - state.alpha * logp2)

    losses = []
    critics = [state.critic1, state.critic2] if cfg.twin_critics else [state.critic1]
    for critic in critics:
        q, cache = critic.q(obs, batch["act"])
        d = q - y
        losses.append(float((d**2).mean()))
        grads, _, _ = critic.backward(cache, 2.0 * d / n)
        adam_update(critic.store, grads, cfg.lr)
    loss = float(np.mean(losses))
    _assert_finite("critic loss", loss)
    return loss


def actor_update(state: TrainState, batch: dict, cfg: SACConfig) -> tuple[float, float]:
    """One Adam step on the actor loss mean(alpha*logpi - min Q(s, a)) with
    reparameterized actions; returns (loss, entropy estimate)."""
    obs = state.scaled(batch["obs"])
    n = obs.shape[0]
    noise = state.rng.normal(size=(n, state.action_dim))
    action, logp, scache = state.actor.sample(obs, noise)

    q1, c1 = state.critic1.q(obs, action)
    if cfg.twin_critics:
        q2, c2 = state.critic2.q(obs, action)
        take1 = q1 <= q2
        qmin = np.where(take1, q1, q2)
    else:
        take1 = np.ones(n, dtype=bool)
        qmin = q1
    alpha = state.alpha
    loss = float((alpha * logp - qmin).mean())

    _, _, d_act1 = state.critic1.backward(c1, -take1.astype(float) / n)
    d_action = d_act1
    if cfg.twin_critics:
        _, _, d_act2 = state.critic2.backward(c2, -(~take1).astype(float) / n)
        d_action = d_act1 + d_act2
    d_logp = np.full(n, alpha / n)
    grads = state.actor.backward(scache, d_action, d_logp)
    adam_update(state.actor.store, grads, cfg.lr)
    entropy = float(-logp.mean())
    _assert_finite("actor loss", loss, entropy)
    return loss, entropy


def alpha_update(state: TrainState, batch: dict, cfg: SACConfig) -> float:
    """One Adam step on the temperature loss -log_alpha*(logpi + target_H)."""
    if not cfg.learn_alpha:
        return state.alpha
    obs = state.scaled(batch["obs"])
    n = obs.shape[0]
    noise = state.rng.normal(size=(n, state.action_dim))
    _, logp, _ = state.actor.sample(obs, noise)
    target_h = cfg.resolved_target_entropy(state.action_dim)
    grad = -float((logp + target_h).mean())
    adam_update(state.log_alpha, {"log_alpha": np.array([grad])}, cfg.lr)
    _assert_finite("alpha", state.alpha)
    return state.alpha


def target_polyak(state: TrainState, tau: float) -> None:
    """target <- (1 - tau)*target + tau*online, per parameter."""
    for target, online in (
        (state.target1, state.critic1.store.params),
        (state.target2, state.critic2.store.params),
    ):
        for name, p in online.items():
            target[name] *= 1.0 - tau
            target[name] += tau * p


@dataclass
class _Worker:
    env: object
    rng: np.random.Generator
    obs: np.ndarray | None = None
    ep_return: float = 0.0
    ep_steps: int = 0


def _reset_worker(w: _Worker, iteration: int) -> None:
    obs, _ = w.env.reset(iteration=iteration)
    w.obs = obs
    w.ep_return = 0.0
    w.ep_steps = 0


def _collect(
    state: TrainState,
    workers: list[_Worker],
    buffer: ReplayBuffer,
    n_steps: int,
    iteration: int,
    random_policy: bool,
    episode_stats: list,
) -> int:
    """Round-robin collection through a single serialized hand-off point;
    runs until at least n_steps transitions are pushed."""
    collected = 0
    while collected < n_steps:
        for w in workers:
            if w.obs is None:
                _reset_worker(w, iteration)
            if random_policy:
                action = w.rng.uniform(-1.0, 1.0, state.action_dim)
            else:
                action = state.act_stochastic(w.obs, w.rng)
            res = w.env.step(action)
            done_kind = (
                "terminal" if res.terminated != "none"
                else ("truncated" if res.truncated else "none")
            )
            buffer.push(w.obs, action, res.reward, res.observation, done_kind)
            w.obs = res.observation
            w.ep_return += res.reward
            w.ep_steps += 1
            collected += 1
            if done_kind != "none":
                episode_stats.append(
                    (w.ep_return, w.ep_steps, res.terminated == "success")
                )
                w.obs = None
            if collected >= n_steps:
                break
    return collected


METRIC_FIELDS = (
    "iteration", "env_steps", "mean_return", "success_rate",
    "critic_loss", "actor_loss", "alpha", "epsilon_frac",
)


def train_loop(env_factory, cfg: SACConfig, seed: int, callback=None):
    """Prefill with a uniform random policy, then alternate collection and
    gradient updates. Returns (TrainState, list of per-iteration metric rows).

    Fully reproducible from the seed: worker envs and their action noise are
    seeded from disjoint spawns of the master seed sequence.
    """
    ss = np.random.SeedSequence(seed)
    state_seed = int(ss.spawn(1)[0].generate_state(1)[0])
    worker_seeds = ss.spawn(cfg.workers)

    probe_env = env_factory(seed=0)
    obs0, _ = probe_env.reset(iteration=0)
    obs_dim = obs0.shape[0]
    action_dim = getattr(probe_env, "action_dim", 3)
    obs_scale = getattr(probe_env, "observation_scale", None)
    if obs_scale is None and hasattr(probe_env, "cfg"):
        obs_scale = observation_scale(probe_env.cfg)

    state = init_train_state(obs_dim, action_dim, cfg, state_seed, obs_scale)
    buffer = ReplayBuffer(cfg.replay_capacity, obs_dim, action_dim)

    workers = []
    for wseed in worker_seeds:
        env_seed, act_seed = (int(s.generate_state(1)[0]) for s in wseed.spawn(2))
        workers.append(_Worker(env_factory(seed=env_seed), np.random.default_rng(act_seed)))

    episode_stats: list = []
    _collect(state, workers, buffer, cfg.prefill_steps, 0, True, episode_stats)
    state.env_steps = cfg.prefill_steps
    prefill_episodes = len(episode_stats)

    metrics = []
    for it in range(cfg.iterations):
        state.iteration = it
        episode_stats = []
        state.env_steps += _collect(
            state, workers, buffer, cfg.env_steps_per_iteration, it, False, episode_stats
        )
        closs = aloss = 0.0
        for _ in range(cfg.updates_per_iteration):
            batch = buffer.sample(cfg.batch_size, state.rng)
            closs = critic_update(state, batch, cfg)
            aloss, _ = actor_update(state, batch, cfg)
            alpha_update(state, batch, cfg)
            target_polyak(state, cfg.polyak_tau)
        eps_frac = 0.0
        if hasattr(workers[0].env, "cfg"):
            eps_frac = workers[0].env.cfg.curriculum.fraction(it)
        row = {
            "iteration": it,
            "env_steps": state.env_steps,
            "mean_return": (
                float(np.mean([e[0] for e in episode_stats])) if episode_stats else math.nan
            ),
            "success_rate": (
                float(np.mean([e[2] for e in episode_stats])) if episode_stats else math.nan
            ),
            "critic_loss": closs,
            "actor_loss": aloss,
            "alpha": state.alpha,
            "epsilon_frac": eps_frac,
        }
        metrics.append(row)
        if callback is not None:
            callback(row)
    return state, metrics


def save_train_state(path, state: TrainState, extra_meta: dict | None = None) -> None:
    arrays = {}
    for prefix, store in (
        ("actor", state.actor.store),
        ("critic1", state.critic1.store),
        ("critic2", state.critic2.store),
    ):
        for n, p in store.params.items():
            arrays[f"{prefix}/{n}"] = p
    for prefix, params in (("target1", state.target1), ("target2", state.target2)):
        for n, p in params.items():
            arrays[f"{prefix}/{n}"] = p
    arrays["log_alpha"] = state.log_alpha.params["log_alpha"]
    arrays["obs_scale"] = state.obs_scale
    meta = {
        "obs_dim": state.actor.spec.input_dim,
        "action_dim": state.action_dim,
        "hidden": list(state.actor.spec.hidden),
        "iteration": state.iteration,
        "env_steps": state.env_steps,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, arrays, meta)


def load_policy(path) -> tuple[ActorNet, np.ndarray, dict]:
    """Rebuild the actor (and its fixed observation scaling) from a checkpoint."""
    arrays, meta = load_checkpoint(path)
    actor = ActorNet(
        meta["obs_dim"], meta["action_dim"], tuple(meta["hidden"]),
        np.random.default_rng(0),
    )
    for name in actor.store.params:
        key = f"actor/{name}"
        if key not in arrays:
            raise ValueError(f"checkpoint missing array {key}")
        actor.store.params[name][...] = arrays[key]
    return actor, arrays["obs_scale"], meta
