"""PPO with a clipped surrogate, GAE, and an asymmetric actor-critic.

The actor maps stacked partial observations to a diagonal Gaussian over the
joint action; the critic regresses returns from the privileged full state.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import Observation, PrivilegedState, TransportEnv
from .nn import (AdamState, DenseNet, NonFiniteError, adam_step, atomic_write, check_finite,
                 clip_by_global_norm, network_record, restore_network, save_checkpoint)

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)

CURVE_COLUMNS = ("iteration", "env_steps", "mean_return", "success_rate", "policy_loss", "value_loss",
                 "entropy")
# elapsed real time is kept out of curves.csv so that file is reproducible byte for byte
TIMING_COLUMNS = ("iteration", "wall_clock_s")


@dataclass
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    minibatch: int = 256
    rollout_steps: int = 2048
    n_envs: int = 1
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    lr: float = 3e-4
    hidden: tuple = (256, 256)
    init_log_std: float = -0.5
    normalize_advantages: bool = True
    iterations: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lambda must lie in [0, 1]")
        self.hidden = tuple(int(h) for h in self.hidden)


# ---------------------------------------------------------------------------
# policy and critic


class GaussianPolicy:
    """Diagonal Gaussian whose mean and log-std come from one network."""

    def __init__(self, obs_size: int, action_size: int, hidden=(256, 256), rng=None,
                 init_log_std: float = -0.5, net: DenseNet | None = None):
        self.obs_size, self.action_size = obs_size, action_size
        if net is None:
            net = DenseNet([obs_size, *hidden, 2 * action_size], rng, out_scale=0.01)
            net.biases[-1][action_size:] = init_log_std
        self.net = net

    def distribution(self, obs_batch):
        out, cache = self.net.forward(obs_batch)
        mean = out[..., :self.action_size]
        raw = out[..., self.action_size:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, raw, cache

    def act(self, observation: Observation, rng=None, deterministic: bool = False):
        if not isinstance(observation, Observation):
            raise TypeError(f"the actor consumes Observation only, got {type(observation).__name__}")
        return self._act(observation.vector, rng, deterministic)

    def _act(self, obs, rng, deterministic):
        mean, log_std, _, _ = self.distribution(obs)
        if deterministic:
            return np.clip(mean, -1.0, 1.0), log_prob(mean, mean, log_std)
        sample = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return sample, log_prob(sample, mean, log_std)


def log_prob(actions, mean, log_std):
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)


def entropy(log_std):
    return np.sum(log_std + 0.5 + HALF_LOG_2PI, axis=-1)


def sample_action(policy: GaussianPolicy, observation: Observation, rng, deterministic: bool = False):
    """Returns ``(env_action, raw_sample, log_prob)``.

    The env action is the sample clamped to [-1, 1]; the log-prob is that of
    the unclamped Gaussian sample.
    """
    raw, lp = policy.act(observation, rng, deterministic)
    return np.clip(raw, -1.0, 1.0), raw, lp


class Critic:
    def __init__(self, privileged_size: int, hidden=(256, 256), rng=None, net: DenseNet | None = None):
        self.net = net or DenseNet([privileged_size, *hidden, 1], rng)

    def value(self, privileged: PrivilegedState) -> float:
        if not isinstance(privileged, PrivilegedState):
            raise TypeError(f"the critic consumes PrivilegedState, got {type(privileged).__name__}")
        return float(self.net(privileged.normalized())[0])


# ---------------------------------------------------------------------------
# advantages


def compute_gae(rewards, values, dones, bootstrap, gamma: float, lam: float):
    """Generalized advantage estimates and returns.

    Inputs are shaped (T,) or (T, E); ``bootstrap`` is V(s_T), shaped () or (E,).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if not (r.shape == v.shape == d.shape):
        raise ValueError("rewards, values and dones must have equal shapes")
    boot = np.broadcast_to(np.asarray(bootstrap, dtype=float), r.shape[1:])
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    for t in range(len(r) - 1, -1, -1):
        next_v = boot if t == len(r) - 1 else v[t + 1]
        live = 1.0 - d[t]
        delta = r[t] + gamma * next_v * live - v[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + v


# ---------------------------------------------------------------------------
# buffer and update


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    privileged: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray = None
    advantages: np.ndarray = None
    returns: np.ndarray = None
    size: int = 0

    @classmethod
    def allocate(cls, steps: int, n_envs: int, obs_size: int, privileged_size: int, action_size: int):
        z = lambda *s: np.zeros((steps, n_envs, *s))
        return cls(z(obs_size), z(privileged_size), z(action_size), z(), z(), z(), z())

    def add(self, obs, privileged, actions, log_probs, rewards, values, dones):
        t = self.size
        self.obs[t], self.privileged[t], self.actions[t] = obs, privileged, actions
        self.log_probs[t], self.rewards[t], self.values[t], self.dones[t] = log_probs, rewards, values, dones
        self.size += 1

    def finish(self, bootstrap, gamma, lam):
        if self.size != len(self.rewards):
            raise ValueError("rollout buffer is not full")
        if not np.all(np.isfinite(self.log_probs)):
            raise NonFiniteError("non-finite behaviour log-probs in rollout")
        self.bootstrap = np.asarray(bootstrap, dtype=float)
        self.advantages, self.returns = compute_gae(self.rewards, self.values, self.dones, self.bootstrap,
                                                    gamma, lam)

    def flat(self):
        n = self.rewards.size
        return {"obs": self.obs.reshape(n, -1), "privileged": self.privileged.reshape(n, -1),
                "actions": self.actions.reshape(n, -1), "log_probs": self.log_probs.reshape(n),
                "advantages": self.advantages.reshape(n), "returns": self.returns.reshape(n)}


def ppo_loss_and_grads(policy: GaussianPolicy, critic: Critic, batch: dict, config: PpoConfig):
    """Clipped-surrogate PPO loss on one minibatch, with exact gradients.

    ``batch["privileged"]`` must already be normalized.
    Returns ``(stats, actor_grads, critic_grads)``.
    """
    adv = batch["advantages"]
    n = len(adv)
    mean, log_std, raw, a_cache = policy.distribution(batch["obs"])
    actions = batch["actions"]
    lp = log_prob(actions, mean, log_std)
    ratio = np.exp(lp - batch["log_probs"])
    clipped = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    policy_loss = -float(np.mean(surr))
    ent = entropy(log_std)

    # d(policy loss)/d(log prob): only where the unclipped branch is the minimum
    active = ratio * adv <= clipped * adv
    d_lp = np.where(active, -ratio * adv, 0.0) / n
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - mean
    d_mean = d_lp[:, None] * diff * inv_var
    d_log_std = d_lp[:, None] * (diff * diff * inv_var - 1.0) - config.entropy_coef / n
    d_log_std = d_log_std * ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX))
    actor_grads, _ = policy.net.backward(a_cache, np.concatenate([d_mean, d_log_std], axis=1))

    v_out, c_cache = critic.net.forward(batch["privileged"])
    v = v_out[:, 0]
    err = v - batch["returns"]
    value_loss = float(np.mean(err * err))
    critic_grads, _ = critic.net.backward(c_cache, (config.value_coef * 2.0 * err / n)[:, None])

    stats = {"policy_loss": policy_loss, "value_loss": value_loss, "entropy": float(np.mean(ent)),
             "ratio_mean": float(np.mean(ratio)), "clip_fraction": float(np.mean(np.abs(ratio - 1) > config.clip)),
             "approx_kl": float(np.mean(batch["log_probs"] - lp))}
    stats["total_loss"] = policy_loss + config.value_coef * value_loss - config.entropy_coef * stats["entropy"]
    return stats, actor_grads, critic_grads


@dataclass
class Learner:
    policy: GaussianPolicy
    critic: Critic
    actor_opt: AdamState
    critic_opt: AdamState
    config: PpoConfig

    @classmethod
    def create(cls, obs_size, privileged_size, action_size, config: PpoConfig, rng):
        policy = GaussianPolicy(obs_size, action_size, config.hidden, rng, config.init_log_std)
        critic = Critic(privileged_size, config.hidden, rng)
        return cls(policy, critic, AdamState.like(policy.net.params(), config.lr),
                   AdamState.like(critic.net.params(), config.lr), config)


def ppo_update(buffer: RolloutBuffer, learner: Learner, rng) -> dict:
    cfg = learner.config
    data = buffer.flat()
    adv = data["advantages"]
    if cfg.normalize_advantages and len(adv) > 1:
        data["advantages"] = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(adv)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            batch = {k: v[idx] for k, v in data.items()}
            stats, ga, gc = ppo_loss_and_grads(learner.policy, learner.critic, batch, cfg)
            if not math.isfinite(stats["total_loss"]):
                raise NonFiniteError(f"non-finite PPO loss: {stats}")
            grads, norm = clip_by_global_norm(ga + gc, cfg.max_grad_norm)
            stats["grad_norm"] = norm
            adam_step(learner.policy.net.params(), grads[:len(ga)], learner.actor_opt)
            adam_step(learner.critic.net.params(), grads[len(ga):], learner.critic_opt)
            learner.policy.net.touch()
            learner.critic.net.touch()
            check_finite(learner.policy.net, "(actor)")
            check_finite(learner.critic.net, "(critic)")
            history.append(stats)
    out = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
    out["first_ratio_mean"] = history[0]["ratio_mean"]
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class Curve:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append({k: row[k] for k in CURVE_COLUMNS + TIMING_COLUMNS[1:]})

    def to_csv(self, path, method: str | None = None):
        """Write curves.csv to ``path`` and timing.csv beside it."""
        atomic_write(path, curves_to_text(self.rows, method))
        timing = ["iteration,wall_clock_s"] + [f"{r['iteration']},{_fmt(r['wall_clock_s'])}" for r in self.rows]
        atomic_write(os.path.join(os.path.dirname(os.path.abspath(path)), "timing.csv"), "\n".join(timing) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def curves_to_text(rows, method: str | None = None) -> str:
    cols = (("method",) if method else ()) + CURVE_COLUMNS
    lines = [",".join(cols)]
    for row in rows:
        vals = ([method] if method else []) + [_fmt(row[c]) for c in CURVE_COLUMNS]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def read_curves(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in CURVE_COLUMNS:
            row[k] = int(row[k]) if k in ("iteration", "env_steps") else float(row[k])
    return rows


class EpisodeStream:
    """Deterministic stream of episode configs: ``make(seed) -> EpisodeConfig``."""

    def __init__(self, make, seed: int):
        self.make = make
        self.rng = np.random.default_rng([int(seed), 0x657069])

    def next(self):
        return self.make(int(self.rng.integers(0, 2**31 - 1)))


def ppo_checkpoint(learner: Learner, seed: int, iteration: int, env: TransportEnv) -> dict:
    return {"method": "dral", "seed": int(seed), "iteration": int(iteration),
            "obs_size": env.obs_size, "privileged_size": env.privileged_size, "action_size": env.action_size,
            "ppo_config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(learner.config).items()},
            "actor": network_record(learner.policy.net, learner.actor_opt),
            "critic": network_record(learner.critic.net, learner.critic_opt)}


def learner_from_checkpoint(doc: dict) -> Learner:
    cfg = PpoConfig(**doc["ppo_config"])
    anet, aopt = restore_network(doc["actor"])
    cnet, copt = restore_network(doc["critic"])
    policy = GaussianPolicy(doc["obs_size"], doc["action_size"], net=anet)
    return Learner(policy, Critic(doc["privileged_size"], net=cnet), aopt, copt, cfg)


@dataclass
class TrainResult:
    learner: Learner
    curve: Curve
    checkpoints: list
    error: str | None = None


def collect_rollout(envs, states, learner: Learner, stream: EpisodeStream, rng, stats):
    """Fill one buffer; ``states`` holds the live (obs, privileged) pair per env."""
    cfg = learner.config
    e0 = envs[0]
    buf = RolloutBuffer.allocate(cfg.rollout_steps, len(envs), e0.obs_size, e0.privileged_size, e0.action_size)
    for _ in range(cfg.rollout_steps):
        obs = np.stack([s[0].vector for s in states])
        priv = np.stack([s[1].normalized() for s in states])
        raw, lp = learner.policy._act(obs, rng, False)
        values = learner.critic.net(priv)[:, 0]
        rewards = np.zeros(len(envs))
        dones = np.zeros(len(envs))
        for i, env in enumerate(envs):
            res = env.step(np.clip(raw[i], -1.0, 1.0))
            rewards[i] = res.reward
            stats["ep_return"][i] += res.reward
            if res.done:
                dones[i] = 1.0
                stats["returns"].append(stats["ep_return"][i])
                stats["outcomes"].append(res.reason)
                stats["ep_return"][i] = 0.0
                states[i] = env.reset(stream.next())
            else:
                states[i] = (res.observation, res.privileged)
        buf.add(obs, priv, raw, lp, rewards, values, dones)
    boot = learner.critic.net(np.stack([s[1].normalized() for s in states]))[:, 0]
    buf.finish(boot, cfg.gamma, cfg.lam)
    return buf


def train_loop(env_factory, make_episode, config: PpoConfig, seed: int = 0, out_dir=None,
               callback=None) -> TrainResult:
    """Collect → GAE → update, ``config.iterations`` times.

    ``env_factory()`` builds one env; ``make_episode(seed)`` builds an
    EpisodeConfig. Checkpoints (as dicts) are kept every
    ``config.checkpoint_every`` iterations and always at the start and end.
    """
    rng = np.random.default_rng([int(seed), 0x70706F])
    envs = [env_factory() for _ in range(config.n_envs)]
    stream = EpisodeStream(make_episode, seed)
    states = [env.reset(stream.next()) for env in envs]
    learner = Learner.create(envs[0].obs_size, envs[0].privileged_size, envs[0].action_size, config, rng)
    curve = Curve()
    checkpoints = [ppo_checkpoint(learner, seed, 0, envs[0])]
    stats = {"ep_return": np.zeros(len(envs)), "returns": [], "outcomes": []}
    t0 = time.perf_counter()
    env_steps = 0
    error = None
    for it in range(1, config.iterations + 1):
        stats["returns"], stats["outcomes"] = [], []
        try:
            buf = collect_rollout(envs, states, learner, stream, rng, stats)
            upd = ppo_update(buf, learner, rng)
        except (FloatingPointError, ArithmeticError) as exc:
            error = f"iteration {it}: {exc}"
            log.error("training aborted: %s", error)
            break
        env_steps += config.rollout_steps * len(envs)
        outcomes = stats["outcomes"]
        curve.append(iteration=it, env_steps=env_steps,
                     mean_return=float(np.mean(stats["returns"])) if stats["returns"] else float("nan"),
                     success_rate=(outcomes.count("success") / len(outcomes)) if outcomes else 0.0,
                     policy_loss=upd["policy_loss"], value_loss=upd["value_loss"], entropy=upd["entropy"],
                     wall_clock_s=round(time.perf_counter() - t0, 3))
        stop = callback is not None and callback(it, curve.rows[-1], learner)
        if config.checkpoint_every and it % config.checkpoint_every == 0:
            checkpoints.append(ppo_checkpoint(learner, seed, it, envs[0]))
        if out_dir is not None:
            curve.to_csv(os.path.join(out_dir, "curves.csv"), "dral")
        if stop:
            break
    if config.iterations > 0 and checkpoints[-1]["iteration"] != len(curve.rows):
        checkpoints.append(ppo_checkpoint(learner, seed, len(curve.rows), envs[0]))
    if out_dir is not None:
        curve.to_csv(os.path.join(out_dir, "curves.csv"), "dral")
        save_checkpoint(os.path.join(out_dir, "checkpoint.json"), checkpoints[-1])
    return TrainResult(learner, curve, checkpoints, error)


class PolicyController:
    """Deterministic deployment controller: observation in, clamped mean out."""

    def __init__(self, policy: GaussianPolicy):
        self.policy = policy

    def reset(self, env, observation, privileged):
        pass

    def __call__(self, env, observation, privileged):
        action, _ = self.policy.act(observation, deterministic=True)
        return action
