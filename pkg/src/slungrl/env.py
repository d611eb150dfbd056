"""Episode wrapper around the physics and world models.

The actor sees an :class:`Observation` (depth rays, ego motion, goal bearing
when in view) while the critic sees a :class:`PrivilegedState` (exact poses,
payload parameters, tensions). They are separate types on purpose.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import physics as ph
from .world import (CLASS_NAMES, GOAL_REGION, PAYLOAD_CLASSES, START_REGION, OccupancyGrid, SensorSpec,
                    depth_scan, free_point, goal_bearing, is_occupied, sample_map, sample_payload)

V_MAX = 3.4
OMEGA_MAX = 0.57
CONTROL_DT = 0.05
SUBSTEPS = 5
FRAME_SIZE = 59
FRAMES = 4
UAV_MASS = 2.0
SUCCESS_RADIUS = 0.5
SUCCESS_SPEED = 0.5
MIN_SEPARATION = 0.3
MAX_TILT = math.radians(60.0)
FLOOR_Z = 0.05
CRASH_SPEED = 1.5 * V_MAX
OBS_LOW, OBS_HIGH = -1.0, 1.5

REASONS = ("running", "success", "collision", "crash", "timeout")


class ConfigError(ValueError):
    pass


class EpisodeOver(RuntimeError):
    """step() called on a finished episode."""


@dataclass
class RandomizationRanges:
    kb_spread: float = 0.2
    mass_spread: float = 0.1
    cable_length: tuple = (0.8, 1.2)
    wind_probability: float = 0.5
    wind_speed: float = 0.3


@dataclass
class RewardWeights:
    progress: float = 10.0
    tilt: float = 0.2
    effort: float = 0.05
    speed: float = 0.5
    time: float = 0.01
    success: float = 100.0
    failure: float = 100.0


@dataclass
class EpisodeConfig:
    seed: int = 0
    difficulty: str = "easy"
    payload_class: str | None = "Box"
    n_uavs: int = 3
    start_region: tuple = START_REGION
    goal: tuple | None = None
    goal_region: tuple = GOAL_REGION
    max_steps: int = 1200
    randomize: bool = True
    # success distance measured in the horizontal plane only
    planar_goal: bool = False
    altitude: float = 1.0

    def __post_init__(self):
        if self.n_uavs < 1:
            raise ConfigError("n_uavs must be >= 1")
        if self.payload_class is not None and self.payload_class not in PAYLOAD_CLASSES:
            raise ConfigError(f"unknown payload class {self.payload_class!r}")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        self.start_region = tuple(tuple(float(v) for v in r) for r in self.start_region)
        self.goal_region = tuple(tuple(float(v) for v in r) for r in self.goal_region)
        if self.goal is not None:
            self.goal = tuple(float(v) for v in self.goal)


def simple_task_config(seed: int, max_steps: int = 200) -> EpisodeConfig:
    """Single UAV, no payload, empty room, goal 1.5-3 m ahead at flight altitude."""
    return EpisodeConfig(seed=seed, difficulty="empty", payload_class=None, n_uavs=1,
                         start_region=((2.0, 2.0), (4.0, 4.0)), goal_region=((3.5, 5.0), (3.3, 4.7)),
                         max_steps=max_steps, randomize=False, planar_goal=True, altitude=1.5)


@dataclass
class Randomization:
    payload: object  # PayloadSample or None
    kb_scale: np.ndarray
    mass_scale: np.ndarray
    cable_length: np.ndarray
    wind: np.ndarray | None


def randomize(seed, payload_class: str | None, n_uavs: int, enabled: bool = True,
              ranges: RandomizationRanges | None = None) -> Randomization:
    ranges = ranges or RandomizationRanges()
    rng = np.random.default_rng([int(seed), 0x72616E64])
    if not enabled:
        payload = None
        if payload_class is not None:
            (lo, hi), geom = PAYLOAD_CLASSES[payload_class]
            payload = sample_payload(payload_class, 0, n_uavs)
            payload.mass = (lo + hi) / 2
            payload.inertia_diag = ph.solid_inertia(geom, payload.mass)
        return Randomization(payload, np.ones(n_uavs), np.ones(n_uavs), np.ones(n_uavs), None)
    payload = sample_payload(payload_class, rng, n_uavs) if payload_class is not None else None
    kb = rng.uniform(1 - ranges.kb_spread, 1 + ranges.kb_spread, n_uavs)
    mass = rng.uniform(1 - ranges.mass_spread, 1 + ranges.mass_spread, n_uavs)
    length = rng.uniform(*ranges.cable_length, n_uavs)
    wind = None
    if rng.random() < ranges.wind_probability:
        wind = np.array([*rng.uniform(-ranges.wind_speed, ranges.wind_speed, 2), 0.0])
    return Randomization(payload, kb, mass, length, wind)


@dataclass
class Observation:
    """Stacked partial observations, shape (n_uavs, frames, 59) flattened."""

    vector: np.ndarray
    n_uavs: int
    frames: int

    def __len__(self):
        return len(self.vector)


@dataclass
class PrivilegedState:
    """Full-state vector for the critic.

    Layout: payload pos/vel/euler/omega (12), payload mass (1), inertia (3),
    class one-hot (3), then per UAV pos/vel/att/rates (12 each), the goal
    vector relative to the carried body (3) and cable tensions (N).
    """

    vector: np.ndarray
    n_uavs: int

    MASS_INDEX = 12

    @staticmethod
    def size(n_uavs: int) -> int:
        return 22 + 13 * n_uavs

    def normalized(self) -> np.ndarray:
        return self.vector * privileged_scale(self.n_uavs)


def privileged_scale(n_uavs: int) -> np.ndarray:
    payload = [0.1] * 3 + [1 / V_MAX] * 3 + [1 / math.pi] * 3 + [1.0] * 3 + [0.5] + [10.0] * 3 + [1.0] * 3
    uav = ([0.1] * 3 + [1 / V_MAX] * 3 + [1 / math.pi] * 3 + [1 / OMEGA_MAX] * 3) * n_uavs
    return np.array(payload + uav + [0.1] * 3 + [0.05] * n_uavs)


@dataclass
class StepResult:
    observation: Observation
    privileged: PrivilegedState
    reward: float
    done: bool
    reason: str
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# pure episode rules


def _carried(y: np.ndarray, n: int, has_payload: bool):
    """Position and velocity of the body that must reach the goal."""
    if has_payload:
        b = ph.UAV_BLOCK * n
    else:
        b = 0
    return y[b:b + 3], y[b + 3:b + 6]


def _goal_distance(pos, goal, planar: bool) -> float:
    d = np.asarray(goal) - pos
    return float(math.hypot(d[0], d[1]) if planar else np.linalg.norm(d))


def _speeds(y: np.ndarray, n: int, has_payload: bool) -> np.ndarray:
    v = [y[ph.UAV_BLOCK * i + 3:ph.UAV_BLOCK * i + 6] for i in range(n)]
    if has_payload:
        v.append(y[ph.UAV_BLOCK * n + 3:ph.UAV_BLOCK * n + 6])
    return np.linalg.norm(np.array(v), axis=1)


def _payload_corners(y, n, corners):
    b = ph.UAV_BLOCK * n
    rot = ph._rotation(y[b + 6], y[b + 7], y[b + 8])
    return y[b:b + 3] + corners @ rot.T


def _occupied_cells(grid: OccupancyGrid, pts: np.ndarray) -> bool:
    """Lateral occupancy (walls, obstacles, ceiling) of any point."""
    r = grid.resolution
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    outside = (x < 0) | (y < 0) | (x >= grid.width) | (y >= grid.depth) | (z >= grid.ceiling)
    if outside.any():
        return True
    ix = np.minimum((x / r).astype(int), grid.shape[0] - 1)
    iy = np.minimum((y / r).astype(int), grid.shape[1] - 1)
    return bool(grid.cells[ix, iy].any())


def _termination(y, n, has_payload, corners, faulted, goal, grid, steps, max_steps, planar) -> str:
    uav_pos = y[:ph.UAV_BLOCK * n].reshape(n, ph.UAV_BLOCK)[:, 0:3]
    speeds = _speeds(y, n, has_payload)
    if faulted or not np.all(np.isfinite(y)):
        return "crash"
    bodies_z = list(uav_pos[:, 2])
    if has_payload:
        b = ph.UAV_BLOCK * n
        if abs(y[b + 6]) > MAX_TILT or abs(y[b + 7]) > MAX_TILT:
            return "crash"
        bodies_z.append(y[b + 2])
    if min(bodies_z) < FLOOR_Z or speeds.max() > CRASH_SPEED:
        return "crash"
    pts = uav_pos
    if has_payload:
        corners = _payload_corners(y, n, corners)
        if corners[:, 2].min() <= 0.0:
            return "collision"
        pts = np.vstack([uav_pos, corners])
    if _occupied_cells(grid, pts):
        return "collision"
    if n > 1:
        diff = uav_pos[:, None, :] - uav_pos[None, :, :]
        dist = np.linalg.norm(diff, axis=2) + np.eye(n) * 1e9
        if dist.min() < MIN_SEPARATION:
            return "collision"
    pos, vel = _carried(y, n, has_payload)
    if _goal_distance(pos, goal, planar) < SUCCESS_RADIUS and np.linalg.norm(vel) < SUCCESS_SPEED:
        return "success"
    if steps >= max_steps:
        return "timeout"
    return "running"


def terminated(state: ph.SystemState, goal, grid: OccupancyGrid, steps: int = 0, max_steps: int = 1200,
               planar: bool = False) -> str:
    has_payload = state.payload is not None
    corners = state.payload.geometry.corners() if has_payload else None
    return _termination(state.to_vector(), state.n, has_payload, corners, state.faulted, goal, grid,
                        steps, max_steps, planar)


def _reward(y_prev, y, n, has_payload, action, goal, reason, weights: RewardWeights, planar) -> float:
    d_prev = _goal_distance(_carried(y_prev, n, has_payload)[0], goal, planar)
    d_now = _goal_distance(_carried(y, n, has_payload)[0], goal, planar)
    r = weights.progress * (d_prev - d_now)
    if has_payload:
        r -= weights.tilt * abs(y[ph.UAV_BLOCK * n + 6])
    r -= weights.effort * float(np.sum(np.square(action)))
    r -= weights.speed * float(np.sum(np.maximum(0.0, _speeds(y, n, has_payload) - V_MAX)))
    r -= weights.time
    if reason == "success":
        r += weights.success
    elif reason in ("collision", "crash"):
        r -= weights.failure
    return float(r)


def reward(prev_state: ph.SystemState, state: ph.SystemState, action, goal, reason: str = "running",
           weights: RewardWeights | None = None, planar: bool = False) -> float:
    return _reward(prev_state.to_vector(), state.to_vector(), state.n, state.payload is not None,
                   np.asarray(action, dtype=float), goal, reason, weights or RewardWeights(), planar)


# ---------------------------------------------------------------------------


class TransportEnv:
    """N UAVs carrying one slung payload (or flying alone) to a goal point."""

    def __init__(self, config: EpisodeConfig | None = None, physics: ph.PhysicsParams | None = None,
                 sensor: SensorSpec | None = None, weights: RewardWeights | None = None,
                 ranges: RandomizationRanges | None = None, frames: int = FRAMES, uav_mass: float = UAV_MASS):
        self.config = config or EpisodeConfig()
        self.physics = physics or ph.PhysicsParams()
        self.sensor = sensor or SensorSpec()
        self.weights = weights or RewardWeights()
        self.ranges = ranges or RandomizationRanges()
        self.frames = frames
        self.uav_mass = uav_mass
        self.done = True
        self.trace = None
        if self.sensor.n_rays != 45:
            raise ConfigError("observation layout assumes 45 depth rays")

    # -- sizes --------------------------------------------------------------
    @property
    def n_uavs(self) -> int:
        return self.config.n_uavs

    @property
    def obs_size(self) -> int:
        return self.n_uavs * self.frames * FRAME_SIZE

    @property
    def privileged_size(self) -> int:
        return PrivilegedState.size(self.n_uavs)

    @property
    def action_size(self) -> int:
        return 4 * self.n_uavs

    # -- lifecycle ----------------------------------------------------------
    def reset(self, config: EpisodeConfig | None = None):
        if config is not None:
            self.config = config
        cfg = self.config
        self.grid = sample_map(cfg.seed, cfg.difficulty)
        rng = np.random.default_rng([int(cfg.seed), 0x656E76])
        self.draw = randomize(cfg.seed, cfg.payload_class, cfg.n_uavs, cfg.randomize, self.ranges)
        params = self.physics
        if self.draw.wind is not None:
            params = replace(params, wind_profile=((0.0, tuple(self.draw.wind)),))
        self.params = params

        if cfg.goal is not None:
            goal = np.array(cfg.goal)
            if is_occupied(self.grid, goal):
                raise ConfigError(f"goal {cfg.goal} is occupied or outside the room")
        else:
            goal = free_point(self.grid, cfg.goal_region, cfg.altitude, rng)
        self.goal = goal
        start = free_point(self.grid, cfg.start_region, cfg.altitude, rng)

        masses = self.uav_mass * self.draw.mass_scale
        if self.draw.payload is not None:
            s = self.draw.payload
            payload = ph.PayloadState(position=start, mass=s.mass, inertia_diag=s.inertia_diag, geometry=s.geometry)
            self.cables = [ph.CableSpec(rest_length=float(L), payload_attach=a)
                           for L, a in zip(self.draw.cable_length, s.attach_points)]
            state, speeds = ph.hover_equilibrium(payload, self.cables, masses, params, self.draw.kb_scale)
        else:
            self.cables = []
            uavs, speeds = [], []
            for i in range(cfg.n_uavs):
                ang = 2 * math.pi * i / cfg.n_uavs
                offset = np.array([math.cos(ang), math.sin(ang), 0.0]) * (0.6 if cfg.n_uavs > 1 else 0.0)
                w = ph.hover_rotor_speeds(masses[i] * params.g, params.k_b * self.draw.kb_scale[i])
                uavs.append(ph.UavState(position=start + offset, rotor_speeds=w, mass=float(masses[i]),
                                        kb_scale=float(self.draw.kb_scale[i])))
                speeds.append(w)
            state = ph.SystemState(uavs, None, 0.0)
            speeds = np.array(speeds)
        self._template = state
        self._corners = state.payload.geometry.corners() if state.payload is not None else None
        self.rig = ph.Rig.build(state, self.cables, params)
        self.y = state.to_vector()
        self.thrust = self.rig.thrust_from_rotors(speeds)
        self.rotor_speeds = speeds
        self.rate_command = np.zeros((cfg.n_uavs, 3))
        self.tensions = self.rig.derivative(self.y, self.thrust)[1]
        self.steps = 0
        self.faulted = False
        self.done = False
        self.reason = "running"
        frame = self._frame()
        self._stack = np.repeat(frame[:, None, :], self.frames, axis=1)
        if self.trace is not None:
            self.trace = []
        return self.observation(), self.privileged()

    @property
    def has_payload(self) -> bool:
        return self.rig.has_payload

    @property
    def state(self) -> ph.SystemState:
        st = self._template.with_vector(self.y, t=self.steps * CONTROL_DT, faulted=self.faulted)
        for uav, w in zip(st.uavs, self.rotor_speeds):
            uav.rotor_speeds = w.copy()
        return st

    def step(self, action) -> StepResult:
        if self.done:
            raise EpisodeOver("episode is over; call reset()")
        n = self.n_uavs
        a = np.clip(np.asarray(action, dtype=float).reshape(n, 4), -1.0, 1.0)
        thrust_cmd = (a[:, 0] + 1.0) * self.uav_mass * self.params.g
        per_rotor = np.sqrt(thrust_cmd / (ph.N_ROTORS * self.params.k_b))
        self.rotor_speeds = np.repeat(per_rotor[:, None], ph.N_ROTORS, axis=1)
        self.thrust = self.rig.thrust_from_rotors(self.rotor_speeds)
        self.rate_command = a[:, 1:4] * OMEGA_MAX
        y_prev = self.y
        y, self.tensions = self.rig.integrate(y_prev, self.thrust, self.params.dt, SUBSTEPS, self.rate_command)
        self.faulted = self.faulted or not ph.vector_is_valid(y, n, self.has_payload)
        self.y = y
        self.steps += 1
        cfg = self.config
        reason = _termination(y, n, self.has_payload, self._corners, self.faulted, self.goal, self.grid,
                              self.steps, cfg.max_steps, cfg.planar_goal)
        r = _reward(y_prev, y, n, self.has_payload, a, self.goal, reason, self.weights, cfg.planar_goal)
        self.reason = reason
        self.done = reason != "running"
        if np.all(np.isfinite(y)):
            self._stack = np.concatenate([self._frame()[:, None, :], self._stack[:, :-1]], axis=1)
        if self.trace is not None:
            self._record(a, r, reason)
        return StepResult(self.observation(), self.privileged(), r, self.done, reason,
                          {"steps": self.steps, "goal_distance": self.goal_distance()})

    # -- observation --------------------------------------------------------
    def goal_distance(self) -> float:
        return _goal_distance(_carried(self.y, self.n_uavs, self.has_payload)[0], self.goal, self.config.planar_goal)

    def _frame(self) -> np.ndarray:
        n = self.n_uavs
        u = self.y[:ph.UAV_BLOCK * n].reshape(n, ph.UAV_BLOCK)
        spec = self.sensor
        out = np.zeros((n, FRAME_SIZE))
        out[:, :45] = depth_scan(self.grid, u[:, 0:3], u[:, 8], spec)
        for i in range(n):
            pos, yaw = u[i, 0:3], float(u[i, 8])
            out[i, 45:48] = u[i, 3:6] / V_MAX
            out[i, 48:51] = u[i, 9:12] / OMEGA_MAX
            out[i, 51:54] = u[i, 6:9] / math.pi
            if self.has_payload:
                out[i, 54] = self.tensions[i] / (self.uav_mass * self.params.g)
            bearing = goal_bearing(pos, yaw, self.goal, spec)
            if bearing is not None:
                out[i, 55:59] = (1.0, bearing[0] / (spec.h_fov / 2), bearing[1] / (spec.v_fov / 2), bearing[2])
        return np.clip(out, OBS_LOW, OBS_HIGH)

    def observation(self) -> Observation:
        return Observation(self._stack.reshape(-1).copy(), self.n_uavs, self.frames)

    def privileged(self) -> PrivilegedState:
        n = self.n_uavs
        v = np.zeros(PrivilegedState.size(n))
        if self.has_payload:
            v[0:12] = self.y[ph.UAV_BLOCK * n:]
            v[12] = self.rig.mp
            v[13:16] = self.rig.inertia
            v[16 + CLASS_NAMES.index(self.config.payload_class)] = 1.0
        v[19:19 + ph.UAV_BLOCK * n] = self.y[:ph.UAV_BLOCK * n]
        k = 19 + ph.UAV_BLOCK * n
        v[k:k + 3] = self.goal - _carried(self.y, n, self.has_payload)[0]
        v[k + 3:k + 3 + n] = self.tensions
        return PrivilegedState(v, n)

    # -- traces -------------------------------------------------------------
    def enable_trace(self):
        self.trace = []

    def _record(self, action, r, reason):
        n = self.n_uavs
        u = self.y[:ph.UAV_BLOCK * n].reshape(n, ph.UAV_BLOCK)
        rec = {"t": round(self.steps * CONTROL_DT, 10), "uav_positions": u[:, 0:3].tolist(),
               "uav_attitudes": u[:, 6:9].tolist(), "action": action.tolist(), "reward": r, "reason": reason}
        if self.has_payload:
            rec["payload_position"] = self.y[ph.UAV_BLOCK * n:ph.UAV_BLOCK * n + 3].tolist()
            rec["payload_orientation"] = self.y[ph.UAV_BLOCK * n + 6:ph.UAV_BLOCK * n + 9].tolist()
        self.trace.append(rec)

    def dump_trace(self, path):
        with open(path, "w") as fh:
            for rec in self.trace or []:
                fh.write(json.dumps(rec) + "\n")


def config_to_dict(cfg: EpisodeConfig) -> dict:
    d = asdict(cfg)
    d["start_region"] = [list(r) for r in cfg.start_region]
    d["goal_region"] = [list(r) for r in cfg.goal_region]
    d["goal"] = list(cfg.goal) if cfg.goal is not None else None
    return d


EPISODE_KEYS = tuple(f.name for f in fields(EpisodeConfig))
