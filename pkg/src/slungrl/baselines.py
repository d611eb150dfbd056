"""Comparison learners: tabular Q-learning, tabular SARSA and DQN.

Tabular methods see a 1440-state discretization of the task and act through
11 macro-actions, each tracked by a small force-feedback controller. DQN sees
the same observation vector as the PPO actor and picks macro-actions too.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import physics as ph
from .env import OMEGA_MAX, SUBSTEPS, TransportEnv
from .nn import AdamState, DenseNet, NonFiniteError, adam_step, network_record, restore_network
from .rl import Curve, EpisodeStream

# (payload velocity reference m/s, yaw command in [-1, 1])
MACRO_ACTIONS = (
    ("hover", (0.0, 0.0, 0.0), 0.0),
    ("+x slow", (0.5, 0.0, 0.0), 0.0),
    ("+x fast", (1.0, 0.0, 0.0), 0.0),
    ("-x slow", (-0.5, 0.0, 0.0), 0.0),
    ("-x fast", (-1.0, 0.0, 0.0), 0.0),
    ("+y", (0.0, 0.5, 0.0), 0.0),
    ("-y", (0.0, -0.5, 0.0), 0.0),
    ("+z", (0.0, 0.0, 0.3), 0.0),
    ("-z", (0.0, 0.0, -0.3), 0.0),
    ("rotate +", (0.0, 0.0, 0.0), 0.5),
    ("rotate -", (0.0, 0.0, 0.0), -0.5),
)
N_MACROS = len(MACRO_ACTIONS)
HOVER = 0

POS_GAIN = 3.0
VEL_GAIN = 3.0
INT_GAIN = 2.0
SWING_GAIN = 0.5
ATT_GAIN = 4.0
MAX_LATERAL_ACC = 3.0
INT_LIMIT = 2.0
REF_LEASH = 0.5


# ---------------------------------------------------------------------------
# macro-actions


def _cable_vectors(state: ph.SystemState, cables) -> np.ndarray:
    """UAV attach point minus payload attach point for every cable, shape (N, 3)."""
    p = state.payload
    rot = ph._rotation(*p.orientation)
    return np.array([uav.position + ph._rotation(*uav.attitude) @ cable.uav_attach
                     - (p.position + rot @ cable.payload_attach)
                     for uav, cable in zip(state.uavs, cables)])


def cable_feedforward(state: ph.SystemState, cables, params: ph.PhysicsParams) -> np.ndarray:
    """Nominal cable force on each UAV, shape (N, 3).

    Each cable is assumed to carry an equal share of the payload weight along
    its current direction. Feeding back the measured tension instead is
    unstable: a UAV that climbs stretches its cable and then asks for more
    thrust.
    """
    out = np.zeros((state.n, 3))
    if state.payload is None:
        return out
    share = state.payload.mass * params.g / state.n
    for i, d in enumerate(_cable_vectors(state, cables)):
        # keep the lift share bounded when a cable swings toward horizontal
        dz = max(d[2], 0.3 * np.linalg.norm(d), 1e-9)
        out[i] = -share * d / dz
    return out


def carried_point(state: ph.SystemState) -> np.ndarray:
    if state.payload is not None:
        return state.payload.position.copy()
    return np.mean([u.position for u in state.uavs], axis=0)


class MacroTracker:
    """Tracks macro-actions with a synchronized formation controller.

    A reference point moves at the macro's velocity and every UAV holds its
    start-of-episode offset from it (PID on position, plus damping of the
    payload swing). The desired thrust vector is ``M (g + a) - F_cable`` with
    a nominal cable feedforward; body rates steer the thrust axis toward it.
    A fresh episode (``env.steps == 0``) re-anchors the formation.
    """

    def __init__(self):
        self.ref = None
        self.offsets = None
        self.integral = None

    def reset(self, env: TransportEnv):
        st = env.state
        self.ref = carried_point(st)
        self.offsets = np.array([u.position for u in st.uavs]) - self.ref
        self.integral = np.zeros((st.n, 3))

    def __call__(self, env: TransportEnv, action_id: int) -> np.ndarray:
        if not 0 <= int(action_id) < N_MACROS:
            raise ValueError(f"unknown macro-action {action_id}")
        if self.ref is None or env.steps == 0:
            self.reset(env)
        st, params = env.state, env.params
        _, v_ref, yaw_cmd = MACRO_ACTIONS[int(action_id)]
        v_ref = np.asarray(v_ref, dtype=float)
        dt = params.dt * SUBSTEPS
        here = carried_point(st)
        self.ref = self.ref + v_ref * dt
        lag = self.ref - here
        dist = np.linalg.norm(lag)
        if dist > REF_LEASH:
            self.ref = here + lag * REF_LEASH / dist
        carried_vel = st.payload.velocity if st.payload is not None else None
        forces = cable_feedforward(st, env.cables, params)
        m, g = env.uav_mass, params.g
        action = np.zeros((st.n, 4))
        for i, uav in enumerate(st.uavs):
            err = self.ref + self.offsets[i] - uav.position
            self.integral[i] = np.clip(self.integral[i] + err * dt, -INT_LIMIT, INT_LIMIT)
            acc = POS_GAIN * err + VEL_GAIN * (v_ref - uav.velocity) + INT_GAIN * self.integral[i]
            if carried_vel is not None:
                acc += SWING_GAIN * (carried_vel - uav.velocity)
            lateral = np.linalg.norm(acc[:2])
            if lateral > MAX_LATERAL_ACC:
                acc[:2] *= MAX_LATERAL_ACC / lateral
            f = m * (np.array([0.0, 0.0, g]) + acc) - forces[i]
            phi, theta, _ = ph.attitude_for_direction(f, uav.attitude[2])
            action[i, 0] = np.linalg.norm(f) / (m * g) - 1.0
            action[i, 1] = ATT_GAIN * (phi - uav.attitude[0]) / OMEGA_MAX
            action[i, 2] = ATT_GAIN * (theta - uav.attitude[1]) / OMEGA_MAX
            action[i, 3] = yaw_cmd
        return np.clip(action, -1.0, 1.0)


def macro_action_to_control(action_id: int, env: TransportEnv, tracker: MacroTracker | None = None) -> np.ndarray:
    """Env-compatible N x 4 command for one macro-action.

    Without a ``tracker`` the formation is anchored at the current state, so a
    single call from equilibrium with the hover id returns the equilibrium
    command. Pass a persistent tracker to follow a macro over many steps.
    """
    return (tracker if tracker is not None else MacroTracker())(env, action_id)


# ---------------------------------------------------------------------------
# discretization


@dataclass(frozen=True)
class Discretizer:
    bearing_bins: int = 8
    range_edges: tuple = (0.5, 1.5, 3.0, 6.0)
    obstacle_edges: tuple = (0.5, 1.0, 2.0)
    tilt_edges: tuple = (math.radians(10.0), math.radians(25.0))
    speed_edges: tuple = (0.3, 1.0)

    @property
    def dims(self):
        return (self.bearing_bins, len(self.range_edges) + 1, len(self.obstacle_edges) + 1,
                len(self.tilt_edges) + 1, len(self.speed_edges) + 1)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.dims))

    def encode_features(self, to_goal, nearest_obstacle: float, tilt: float, speed: float) -> int:
        width = 2 * math.pi / self.bearing_bins
        ang = math.atan2(to_goal[1], to_goal[0])
        b = int(math.floor((ang + width / 2) / width)) % self.bearing_bins
        r = int(np.searchsorted(self.range_edges, float(np.linalg.norm(to_goal)), side="right"))
        o = int(np.searchsorted(self.obstacle_edges, nearest_obstacle, side="right"))
        t = int(np.searchsorted(self.tilt_edges, abs(tilt), side="right"))
        s = int(np.searchsorted(self.speed_edges, speed, side="right"))
        return int(np.ravel_multi_index((b, r, o, t, s), self.dims))

    def encode(self, env: TransportEnv) -> int:
        n = env.n_uavs
        y = env.y
        b = ph.UAV_BLOCK * n if env.has_payload else 0
        pos, vel = y[b:b + 3], y[b + 3:b + 6]
        tilt = y[b + 6] if env.has_payload else 0.0
        nearest = float(env._stack[:, 0, :45].min()) * env.sensor.max_range
        return self.encode_features(env.goal - pos, nearest, tilt, float(np.linalg.norm(vel)))


# ---------------------------------------------------------------------------
# tabular learning


class QTable:
    def __init__(self, n_states: int, n_actions: int):
        self.values = np.zeros((n_states, n_actions))

    def greedy(self, s: int) -> int:
        return int(np.argmax(self.values[s]))

    def epsilon_greedy(self, s: int, epsilon: float, rng) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(self.values.shape[1]))
        return self.greedy(s)


def q_learning_update(table: QTable, s, a, r, s_next, done, alpha, gamma) -> float:
    """Off-policy TD update of one cell. Returns the TD error."""
    target = r + (0.0 if done else gamma * float(np.max(table.values[s_next])))
    td = target - table.values[s, a]
    table.values[s, a] += alpha * td
    return float(td)


def sarsa_update(table: QTable, s, a, r, s_next, a_next, done, alpha, gamma) -> float:
    target = r + (0.0 if done else gamma * float(table.values[s_next, a_next]))
    td = target - table.values[s, a]
    table.values[s, a] += alpha * td
    return float(td)


def linear_epsilon(step: int, start: float, end: float, decay_steps: int) -> float:
    if decay_steps <= 0:
        return end
    if step >= decay_steps:
        return end
    return start + max(step, 0) / decay_steps * (end - start)


def epsilon_greedy_entropy(epsilon: float, n_actions: int) -> float:
    p_best = 1.0 - epsilon + epsilon / n_actions
    p_other = epsilon / n_actions
    h = -p_best * math.log(p_best)
    if p_other > 0:
        h -= (n_actions - 1) * p_other * math.log(p_other)
    return h


# ---------------------------------------------------------------------------
# gridworld fixture


class GridWorld:
    """Deterministic 5x5 gridworld; bumping a wall or the border leaves the agent in place."""

    LAYOUT = ("S....",
              ".#.#.",
              ".#...",
              "...#.",
              "#...G")
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right

    def __init__(self, step_reward: float = -0.01, goal_reward: float = 1.0):
        self.rows = len(self.LAYOUT)
        self.cols = len(self.LAYOUT[0])
        self.step_reward, self.goal_reward = step_reward, goal_reward
        self.walls = {(r, c) for r in range(self.rows) for c in range(self.cols) if self.LAYOUT[r][c] == "#"}
        self.goal = next((r, c) for r in range(self.rows) for c in range(self.cols) if self.LAYOUT[r][c] == "G")

    @property
    def n_states(self):
        return self.rows * self.cols

    n_actions = 4

    def index(self, cell):
        return cell[0] * self.cols + cell[1]

    def cell(self, s):
        return divmod(s, self.cols)

    def open_states(self):
        return [self.index((r, c)) for r in range(self.rows) for c in range(self.cols)
                if (r, c) not in self.walls and (r, c) != self.goal]

    def transition(self, s, a):
        r, c = self.cell(s)
        dr, dc = self.MOVES[a]
        nr, nc = r + dr, c + dc
        if not (0 <= nr < self.rows and 0 <= nc < self.cols) or (nr, nc) in self.walls:
            nr, nc = r, c
        s2 = self.index((nr, nc))
        if (nr, nc) == self.goal:
            return s2, self.goal_reward, True
        return s2, self.step_reward, False


def value_iteration(world: GridWorld, gamma: float, tol: float = 1e-13):
    """Exact optimal action values by repeated Bellman backups."""
    q = np.zeros((world.n_states, world.n_actions))
    states = world.open_states()
    while True:
        delta = 0.0
        for s in states:
            for a in range(world.n_actions):
                s2, r, done = world.transition(s, a)
                v = r + (0.0 if done else gamma * q[s2].max())
                delta = max(delta, abs(v - q[s, a]))
                q[s, a] = v
        if delta < tol:
            return q


def optimal_action_sets(q, states, tie_tol: float = 1e-9):
    return {s: set(np.flatnonzero(q[s] >= q[s].max() - tie_tol)) for s in states}


def policy_matches(table: QTable, optimal: dict) -> bool:
    """Greedy actions equal the unique optimum on every non-tie state."""
    for s, best in optimal.items():
        if len(best) == 1 and table.greedy(s) not in best:
            return False
    return True


def train_gridworld(method: str, seed: int, world: GridWorld | None = None, episodes: int = 50_000,
                    alpha: float = 0.1, gamma: float = 0.95, eps_start: float = 1.0, eps_end: float = 0.02,
                    check_every: int = 250, max_episode_steps: int = 100):
    """Tabular learning with exploring starts. Returns (table, episodes_used, matched)."""
    world = world or GridWorld()
    optimal = optimal_action_sets(value_iteration(world, gamma), world.open_states())
    rng = np.random.default_rng(seed)
    table = QTable(world.n_states, world.n_actions)
    starts = world.open_states()
    decay = episodes // 2
    for ep in range(1, episodes + 1):
        eps = linear_epsilon(ep, eps_start, eps_end, decay)
        s = starts[int(rng.integers(len(starts)))]
        a = table.epsilon_greedy(s, eps, rng)
        for _ in range(max_episode_steps):
            s2, r, done = world.transition(s, a)
            a2 = table.epsilon_greedy(s2, eps, rng)
            if method == "qlearning":
                q_learning_update(table, s, a, r, s2, done, alpha, gamma)
            elif method == "sarsa":
                sarsa_update(table, s, a, r, s2, a2, done, alpha, gamma)
            else:
                raise ValueError(f"unknown tabular method {method!r}")
            if done:
                break
            s, a = s2, a2
        if ep % check_every == 0 and policy_matches(table, optimal):
            return table, ep, True
    return table, episodes, policy_matches(table, optimal)


# ---------------------------------------------------------------------------
# DQN


@dataclass
class DqnConfig:
    capacity: int = 100_000
    batch: int = 64
    target_sync: int = 1000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 200_000
    gamma: float = 0.99
    lr: float = 1e-3
    hidden: tuple = (64, 64)
    learning_starts: int = 1000
    train_every: int = 1

    def __post_init__(self):
        if self.capacity < self.batch:
            raise ValueError("replay capacity must be >= batch size")
        if not (0 <= self.eps_end <= 1 and 0 <= self.eps_start <= 1):
            raise ValueError("epsilon must lie in [0, 1]")
        self.hidden = tuple(int(h) for h in self.hidden)


class ReplayBuffer:
    """FIFO ring of (obs, action, reward, next_obs, done, discount).

    ``discount`` is the factor applied to the bootstrap; ``None`` means the
    learner's own gamma.
    """

    def __init__(self, capacity: int, obs_size: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_size))
        self.next_obs = np.zeros((capacity, obs_size))
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.discounts = np.full(capacity, np.nan)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, done, discount=None):
        i = self.head
        self.discounts[i] = np.nan if discount is None else discount
        self.obs[i], self.actions[i], self.rewards[i] = obs, action, reward
        self.next_obs[i], self.dones[i] = next_obs, float(done)
        self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def oldest(self) -> int:
        return (self.head - self.size) % self.capacity

    def sample(self, batch: int, rng) -> dict:
        idx = rng.integers(0, self.size, batch)
        return {"obs": self.obs[idx], "actions": self.actions[idx], "rewards": self.rewards[idx],
                "next_obs": self.next_obs[idx], "dones": self.dones[idx], "discounts": self.discounts[idx]}


def dqn_loss_and_grads(net: DenseNet, target: DenseNet, batch: dict, gamma: float):
    q_next = target(batch["next_obs"])
    disc = batch.get("discounts")
    disc = np.full(len(batch["rewards"]), gamma) if disc is None else np.where(np.isnan(disc), gamma, disc)
    y = batch["rewards"] + disc * q_next.max(axis=1) * (1.0 - batch["dones"])
    q, cache = net.forward(batch["obs"])
    rows = np.arange(len(y))
    err = q[rows, batch["actions"]] - y
    loss = float(np.mean(err * err))
    g = np.zeros_like(q)
    g[rows, batch["actions"]] = 2.0 * err / len(y)
    grads, _ = net.backward(cache, g)
    return loss, grads


def dqn_update(net: DenseNet, target: DenseNet, batch: dict, config: DqnConfig, opt: AdamState) -> float:
    """One Adam step on the mean squared TD error against the target network."""
    loss, grads = dqn_loss_and_grads(net, target, batch, config.gamma)
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite DQN loss {loss}")
    adam_step(net.params(), grads, opt)
    net.touch()
    return loss


def sync_target(net: DenseNet, target: DenseNet):
    target.set_params([p.copy() for p in net.params()])


# ---------------------------------------------------------------------------
# training against the transport env


@dataclass
class TabularConfig:
    alpha: float = 0.1
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 50_000
    hold_steps: int = 5


class MacroAgent:
    """Shared rollout plumbing: a decision every ``hold_steps`` env steps."""

    def __init__(self, hold_steps: int):
        self.hold_steps = hold_steps
        self.tracker = MacroTracker()

    def run_decision(self, env: TransportEnv, action_id: int, limit: int | None = None):
        """Hold one macro-action. Returns (last StepResult, discounted reward, gamma**k)."""
        total, discount, res = 0.0, 1.0, None
        for _ in range(min(self.hold_steps, limit or self.hold_steps)):
            res = env.step(self.tracker(env, action_id))
            total += discount * res.reward
            discount *= self.gamma
            if res.done:
                break
        return res, total, discount


def _curve_row(curve, it, env_steps, returns, outcomes, td, entropy, t0):
    curve.append(iteration=it, env_steps=env_steps,
                 mean_return=float(np.mean(returns)) if returns else float("nan"),
                 success_rate=outcomes.count("success") / len(outcomes) if outcomes else 0.0,
                 policy_loss=float("nan"), value_loss=float(np.mean(td)) if td else float("nan"),
                 entropy=entropy, wall_clock_s=round(time.perf_counter() - t0, 3))


class TabularAgent(MacroAgent):
    def __init__(self, method: str, config: TabularConfig, discretizer: Discretizer | None = None):
        super().__init__(config.hold_steps)
        if method not in ("qlearning", "sarsa"):
            raise ValueError(f"unknown tabular method {method!r}")
        self.method = method
        self.config = config
        self.gamma = config.gamma
        self.discretizer = discretizer or Discretizer()
        self.table = QTable(self.discretizer.n_states, N_MACROS)

    def train(self, env_factory, make_episode, seed: int, iterations: int, steps_per_iteration: int,
              callback=None) -> Curve:
        cfg = self.config
        rng = np.random.default_rng([int(seed), 0x746162])
        stream = EpisodeStream(make_episode, seed)
        env = env_factory()
        env.reset(stream.next())
        s = self.discretizer.encode(env)
        decisions = 0
        eps = cfg.eps_start
        a = self.table.epsilon_greedy(s, eps, rng)
        ep_return, env_steps = 0.0, 0
        curve, t0 = Curve(), time.perf_counter()
        for it in range(1, iterations + 1):
            returns, outcomes, td = [], [], []
            budget = env_steps + steps_per_iteration
            while env_steps < budget:
                before = env.steps
                res, r, discount = self.run_decision(env, a, budget - env_steps)
                env_steps += env.steps - before
                ep_return += r
                decisions += 1
                eps = linear_epsilon(decisions, cfg.eps_start, cfg.eps_end, cfg.eps_decay_steps)
                s2 = self.discretizer.encode(env)
                a2 = self.table.epsilon_greedy(s2, eps, rng)
                if self.method == "qlearning":
                    err = q_learning_update(self.table, s, a, r, s2, res.done, cfg.alpha, discount)
                else:
                    err = sarsa_update(self.table, s, a, r, s2, a2, res.done, cfg.alpha, discount)
                td.append(err * err)
                if res.done:
                    returns.append(ep_return)
                    outcomes.append(res.reason)
                    ep_return = 0.0
                    env.reset(stream.next())
                    s2 = self.discretizer.encode(env)
                    a2 = self.table.epsilon_greedy(s2, eps, rng)
                s, a = s2, a2
            _curve_row(curve, it, env_steps, returns, outcomes, td, epsilon_greedy_entropy(eps, N_MACROS), t0)
            if callback is not None and callback(it, curve.rows[-1], self):
                break
        return curve

    def checkpoint(self, seed: int) -> dict:
        return {"method": self.method, "seed": int(seed), "tabular_config": asdict(self.config),
                "discretizer": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.discretizer).items()},
                "table": self.table.values.tolist()}

    @classmethod
    def from_checkpoint(cls, doc: dict) -> "TabularAgent":
        disc = Discretizer(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc["discretizer"].items()})
        agent = cls(doc["method"], TabularConfig(**doc["tabular_config"]), disc)
        agent.table.values = np.array(doc["table"], dtype=float)
        return agent

    def controller(self):
        return MacroController(self.hold_steps, lambda env, obs: self.table.greedy(self.discretizer.encode(env)))


class DqnAgent(MacroAgent):
    def __init__(self, obs_size: int, config: DqnConfig, hold_steps: int = 5, rng=None):
        super().__init__(hold_steps)
        self.config = config
        self.gamma = config.gamma
        rng = rng if rng is not None else np.random.default_rng(0)
        self.net = DenseNet([obs_size, *config.hidden, N_MACROS], rng)
        self.target = self.net.copy()
        self.opt = AdamState.like(self.net.params(), config.lr)
        self.obs_size = obs_size

    def q_values(self, obs_vector):
        return self.net(obs_vector)

    def train(self, env_factory, make_episode, seed: int, iterations: int, steps_per_iteration: int,
              callback=None) -> Curve:
        cfg = self.config
        rng = np.random.default_rng([int(seed), 0x64716E])
        stream = EpisodeStream(make_episode, seed)
        env = env_factory()
        obs, _ = env.reset(stream.next())
        replay = ReplayBuffer(cfg.capacity, self.obs_size)
        decisions, env_steps, ep_return = 0, 0, 0.0
        curve, t0 = Curve(), time.perf_counter()
        eps = cfg.eps_start
        for it in range(1, iterations + 1):
            returns, outcomes, losses = [], [], []
            budget = env_steps + steps_per_iteration
            while env_steps < budget:
                eps = linear_epsilon(decisions, cfg.eps_start, cfg.eps_end, cfg.eps_decay_steps)
                if rng.random() < eps:
                    a = int(rng.integers(N_MACROS))
                else:
                    a = int(np.argmax(self.q_values(obs.vector)))
                before = env.steps
                res, r, discount = self.run_decision(env, a, budget - env_steps)
                env_steps += env.steps - before
                decisions += 1
                ep_return += r
                replay.add(obs.vector, a, r, res.observation.vector, res.done, discount)
                obs = res.observation
                if res.done:
                    returns.append(ep_return)
                    outcomes.append(res.reason)
                    ep_return = 0.0
                    obs, _ = env.reset(stream.next())
                if len(replay) >= max(cfg.learning_starts, cfg.batch) and decisions % cfg.train_every == 0:
                    batch = replay.sample(cfg.batch, rng)
                    losses.append(dqn_update(self.net, self.target, batch, cfg, self.opt))
                if decisions % cfg.target_sync == 0:
                    sync_target(self.net, self.target)
            _curve_row(curve, it, env_steps, returns, outcomes, losses, epsilon_greedy_entropy(eps, N_MACROS), t0)
            if callback is not None and callback(it, curve.rows[-1], self):
                break
        return curve

    def checkpoint(self, seed: int) -> dict:
        return {"method": "dqn", "seed": int(seed), "obs_size": self.obs_size, "hold_steps": self.hold_steps,
                "dqn_config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.config).items()},
                "q_net": network_record(self.net, self.opt), "target_net": network_record(self.target)}

    @classmethod
    def from_checkpoint(cls, doc: dict) -> "DqnAgent":
        agent = cls(doc["obs_size"], DqnConfig(**doc["dqn_config"]), doc["hold_steps"])
        agent.net, agent.opt = restore_network(doc["q_net"])
        agent.target, _ = restore_network(doc["target_net"])
        return agent

    def controller(self):
        return MacroController(self.hold_steps, lambda env, obs: int(np.argmax(self.q_values(obs.vector))))


class MacroController:
    """Greedy macro-action deployment: re-decide every ``hold_steps`` env steps."""

    def __init__(self, hold_steps: int, choose):
        self.hold_steps = hold_steps
        self.choose = choose
        self.count = 0
        self.current = HOVER
        self.tracker = MacroTracker()

    def reset(self, env, observation, privileged):
        self.count = 0
        self.tracker.reset(env)

    def __call__(self, env, observation, privileged):
        if self.count % self.hold_steps == 0:
            self.current = self.choose(env, observation)
        self.count += 1
        return self.tracker(env, self.current)
