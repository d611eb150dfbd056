"""Experiment configs, evaluation, result tables and the command line."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

import numpy as np
import yaml

from . import baselines as bl
from . import physics as ph
from .env import (CONTROL_DT, ConfigError, EpisodeConfig, RandomizationRanges, RewardWeights,
                  TransportEnv, simple_task_config)
from .nn import atomic_write, load_checkpoint, save_checkpoint
from .rl import PolicyController, PpoConfig, learner_from_checkpoint, read_curves, train_loop
from .world import CLASS_NAMES, attach_pattern, sample_map

log = logging.getLogger(__name__)

METHODS = ("dral", "qlearning", "sarsa", "dqn")
METHOD_LABELS = {"dral": "DRAL", "qlearning": "Q Learning", "sarsa": "Sarsa", "dqn": "Deep-Q Learning"}
OUTCOMES = ("success", "collision", "crash", "timeout")
MISSING_CELL = "—"

SUMMARY_COLUMNS = ("method", "class", "trials", "successes", "success_rate", "reach_time_mean_s",
                   "reach_time_std_s")
TRIAL_COLUMNS = ("seed", "class", "outcome", "reach_time_s", "steps", "path_length_m")


class UserError(Exception):
    """Bad input from the user: exit code 1."""


# ---------------------------------------------------------------------------
# config schema


@dataclass
class EnvBlock:
    task: str = "full"  # "full" or "simple"
    difficulty: str = "easy"
    payload_class: str | None = "Box"
    n_uavs: int = 3
    max_steps: int = 1200
    randomize: bool = True
    altitude: float = 1.0
    randomization: RandomizationRanges = field(default_factory=RandomizationRanges)
    reward: RewardWeights = field(default_factory=RewardWeights)


@dataclass
class EvalBlock:
    n_trials: int = 20
    classes: tuple = CLASS_NAMES
    seeds: tuple = (0, 1, 2)
    trial_seed_base: int = 900_000


@dataclass
class TabularLearner:
    alpha: float = 0.1
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 50_000
    hold_steps: int = 5
    iterations: int = 100
    steps_per_iteration: int = 2048


@dataclass
class DqnLearner(bl.DqnConfig):
    hold_steps: int = 5
    iterations: int = 100
    steps_per_iteration: int = 2048


LEARNER_TYPES = {"dral": PpoConfig, "qlearning": TabularLearner, "sarsa": TabularLearner, "dqn": DqnLearner}


@dataclass
class BenchBlock:
    methods: tuple = METHODS
    # match every baseline's step budget to the PPO run
    align_budgets: bool = True
    learners: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    method: str = "dral"
    seed: int = 0
    output_dir: str = "runs/default"
    env: EnvBlock = field(default_factory=EnvBlock)
    physics: ph.PhysicsParams = field(default_factory=ph.PhysicsParams)
    learner: object = None
    eval: EvalBlock = field(default_factory=EvalBlock)
    bench: BenchBlock = field(default_factory=BenchBlock)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: must be one of {', '.join(METHODS)}, got {self.method!r}")
        if self.learner is None:
            self.learner = LEARNER_TYPES[self.method]()
        if not isinstance(self.learner, LEARNER_TYPES[self.method]):
            raise ConfigError(f"learner: block does not match method {self.method!r}")
        if not self.eval.seeds:
            raise ConfigError("eval.seeds: must be non-empty")
        if self.env.task not in ("full", "simple"):
            raise ConfigError(f"env.task: must be 'full' or 'simple', got {self.env.task!r}")


def _scalar(value, tp, path):
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _convert(cls, data, path):
    """Strictly build dataclass ``cls`` from a mapping; unknown keys are errors."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"{where}: unknown key")
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        tp = hints[key]
        optional = False
        if isinstance(tp, types.UnionType) or typing.get_origin(tp) is typing.Union:
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            optional = len(args) < len(typing.get_args(tp))
            tp = args[0] if len(args) == 1 else object
        if value is None:
            if not optional:
                raise ConfigError(f"{where}: may not be null")
            kwargs[key] = None
        elif is_dataclass(tp):
            kwargs[key] = _convert(tp, value, where)
        elif tp is tuple:
            if not isinstance(value, list):
                raise ConfigError(f"{where}: expected a list, got {value!r}")
            kwargs[key] = _tuplify(value)
        else:
            kwargs[key] = _scalar(value, tp, where)
    try:
        return cls(**kwargs)
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: expected a mapping")
    data = dict(data)
    method = data.get("method", "dral")
    if method not in METHODS:
        raise ConfigError(f"method: must be one of {', '.join(METHODS)}, got {method!r}")
    learner = _convert(LEARNER_TYPES[method], data.pop("learner", None), "learner")
    bench_raw = data.pop("bench", None) or {}
    if not isinstance(bench_raw, dict):
        raise ConfigError("bench: expected a mapping")
    raw_learners = bench_raw.get("learners") or {}
    if not isinstance(raw_learners, dict):
        raise ConfigError("bench.learners: expected a mapping")
    learners = {}
    for name, block in raw_learners.items():
        if name not in METHODS:
            raise ConfigError(f"bench.learners.{name}: unknown key")
        learners[name] = _convert(LEARNER_TYPES[name], block, f"bench.learners.{name}")
    bench = _convert(BenchBlock, {k: v for k, v in bench_raw.items() if k != "learners"}, "bench")
    bench.learners = learners
    for m in bench.methods:
        if m not in METHODS:
            raise ConfigError(f"bench.methods: unknown method {m!r}")
    physics_raw = data.pop("physics", None) or {}
    if not isinstance(physics_raw, dict):
        raise ConfigError("physics: expected a mapping")
    for key in physics_raw:
        if key not in {f.name for f in fields(ph.PhysicsParams)}:
            raise ConfigError(f"physics.{key}: unknown key")
    try:
        physics = ph.PhysicsParams(**{k: _tuplify(v) for k, v in physics_raw.items()})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"physics: {exc}") from None
    cfg = _convert(ExperimentConfig, data, "")
    cfg.learner = learner
    cfg.physics = physics
    cfg.bench = bench
    cfg.__post_init__()
    return cfg


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(cfg)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UserError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark is not None else str(path)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{where}: {problem}") from None
    return config_from_dict(data or {})


def save_config(cfg: ExperimentConfig, path):
    atomic_write(path, yaml.safe_dump(config_to_dict(cfg), sort_keys=False))


# ---------------------------------------------------------------------------
# episodes and controllers


def episode_maker(cfg: ExperimentConfig, payload_class="__config__"):
    env = cfg.env
    cls = env.payload_class if payload_class == "__config__" else payload_class

    def make(seed: int) -> EpisodeConfig:
        if env.task == "simple":
            return simple_task_config(seed, env.max_steps)
        return EpisodeConfig(seed=seed, difficulty=env.difficulty, payload_class=cls, n_uavs=env.n_uavs,
                             max_steps=env.max_steps, randomize=env.randomize, altitude=env.altitude)
    return make


def env_factory(cfg: ExperimentConfig):
    def build() -> TransportEnv:
        return TransportEnv(episode_maker(cfg)(0), physics=cfg.physics, weights=cfg.env.reward,
                            ranges=cfg.env.randomization)
    return build


def _tabular_config(learner: TabularLearner) -> bl.TabularConfig:
    return bl.TabularConfig(alpha=learner.alpha, gamma=learner.gamma, eps_start=learner.eps_start,
                            eps_end=learner.eps_end, eps_decay_steps=learner.eps_decay_steps,
                            hold_steps=learner.hold_steps)


def _dqn_config(learner: DqnLearner) -> bl.DqnConfig:
    names = {f.name for f in fields(bl.DqnConfig)}
    return bl.DqnConfig(**{k: v for k, v in asdict(learner).items() if k in names})


def controller_from_checkpoint(doc: dict):
    method = doc.get("method")
    if method == "dral":
        return PolicyController(learner_from_checkpoint(doc).policy)
    if method in ("qlearning", "sarsa"):
        return bl.TabularAgent.from_checkpoint(doc).controller()
    if method == "dqn":
        return bl.DqnAgent.from_checkpoint(doc).controller()
    raise UserError(f"checkpoint has unknown method {method!r}")


# ---------------------------------------------------------------------------
# training


def train(cfg: ExperimentConfig, seed: int | None = None, out_dir=None, callback=None):
    """Train ``cfg.method``. Writes curves.csv and checkpoint.json into ``out_dir``.

    Returns ``(curve, checkpoint_doc)``.
    """
    seed = cfg.seed if seed is None else int(seed)
    out_dir = out_dir or os.path.join(cfg.output_dir, cfg.method, f"seed{seed}")
    os.makedirs(out_dir, exist_ok=True)
    factory, make = env_factory(cfg), episode_maker(cfg)
    if cfg.method == "dral":
        res = train_loop(factory, make, cfg.learner, seed=seed, out_dir=out_dir, callback=callback)
        if res.error:
            raise RuntimeError(res.error)
        return res.curve, res.checkpoints[-1]
    learner = cfg.learner
    if cfg.method in ("qlearning", "sarsa"):
        agent = bl.TabularAgent(cfg.method, _tabular_config(learner))
    else:
        obs_size = factory().obs_size
        agent = bl.DqnAgent(obs_size, _dqn_config(learner), learner.hold_steps,
                            rng=np.random.default_rng([seed, 0x716E6574]))
    curve = agent.train(factory, make, seed, learner.iterations, learner.steps_per_iteration, callback)
    doc = agent.checkpoint(seed)
    doc["iteration"] = len(curve.rows)
    curve.to_csv(os.path.join(out_dir, "curves.csv"), cfg.method)
    save_checkpoint(os.path.join(out_dir, "checkpoint.json"), doc)
    return curve, doc


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class TrialRecord:
    seed: int
    payload_class: str
    outcome: str
    reach_time_s: float | None
    steps: int
    path_length_m: float

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if (self.reach_time_s is not None) != (self.outcome == "success"):
            raise ValueError("reach time is defined exactly on success")


@dataclass
class ClassSummary:
    trials: int
    successes: int
    reach_time_mean_s: float | None
    reach_time_std_s: float | None

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0


@dataclass
class MetricsSummary:
    method: str
    classes: dict  # class name -> ClassSummary

    @classmethod
    def from_records(cls, method: str, records) -> "MetricsSummary":
        by_class = {}
        for rec in records:
            by_class.setdefault(rec.payload_class, []).append(rec)
        out = {}
        for name, recs in by_class.items():
            times = [r.reach_time_s for r in recs if r.outcome == "success"]
            out[name] = ClassSummary(len(recs), len(times), float(np.mean(times)) if times else None,
                                     float(np.std(times)) if times else None)
        return cls(method, out)


def class_label(payload_class) -> str:
    return payload_class if payload_class is not None else "none"


def run_trial(env: TransportEnv, controller, episode: EpisodeConfig) -> TrialRecord:
    obs, priv = env.reset(episode)
    if hasattr(controller, "reset"):
        controller.reset(env, obs, priv)
    pos = _carried_position(env)
    path = 0.0
    while True:
        res = env.step(controller(env, obs, priv))
        obs, priv = res.observation, res.privileged
        nxt = _carried_position(env)
        path += float(np.linalg.norm(nxt - pos))
        pos = nxt
        if res.done:
            break
    reach = round(env.steps * CONTROL_DT, 10) if res.reason == "success" else None
    return TrialRecord(episode.seed, class_label(episode.payload_class), res.reason, reach, env.steps, path)


def _carried_position(env: TransportEnv) -> np.ndarray:
    b = ph.UAV_BLOCK * env.n_uavs if env.has_payload else 0
    return env.y[b:b + 3].copy()


def trial_seeds(cfg: ExperimentConfig):
    return [cfg.eval.trial_seed_base + k for k in range(cfg.eval.n_trials)]


def eval_classes(cfg: ExperimentConfig):
    if cfg.env.task == "simple" or cfg.env.payload_class is None:
        return [None]
    return list(cfg.eval.classes)


def run_eval(checkpoint, cfg: ExperimentConfig, out_dir=None):
    """Deterministic evaluation of one checkpoint on every eval class.

    ``checkpoint`` is a path or a loaded document. Returns ``(summary, records)``
    and writes trials.csv and summary.csv into ``out_dir`` when given.
    """
    if not isinstance(checkpoint, dict):
        if not os.path.exists(checkpoint):
            raise UserError(f"checkpoint not found: {checkpoint}")
        try:
            doc = load_checkpoint(checkpoint)
        except (ValueError, OSError) as exc:
            raise UserError(str(exc)) from None
    else:
        doc = checkpoint
    if doc.get("method") != cfg.method:
        raise UserError(f"checkpoint method {doc.get('method')!r} does not match config method {cfg.method!r}")
    env = env_factory(cfg)()
    expected = env.obs_size
    if doc.get("obs_size", expected) != expected:
        raise UserError(f"checkpoint expects {doc['obs_size']} observation inputs, config gives {expected}")
    controller = controller_from_checkpoint(doc)
    records = []
    for cls in eval_classes(cfg):
        make = episode_maker(cfg, cls)
        for s in trial_seeds(cfg):
            records.append(run_trial(env, controller, make(s)))
    summary = MetricsSummary.from_records(cfg.method, records)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        atomic_write(os.path.join(out_dir, "trials.csv"), trials_to_text(records))
        atomic_write(os.path.join(out_dir, "summary.csv"), summary_to_text([summary]))
    return summary, records


def _num(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def trials_to_text(records) -> str:
    return _csv_text(TRIAL_COLUMNS, [(r.seed, r.payload_class, r.outcome, _num(r.reach_time_s), r.steps,
                                      _num(r.path_length_m)) for r in records])


def summary_to_text(summaries) -> str:
    rows = []
    for s in summaries:
        for name, c in s.classes.items():
            rows.append((s.method, name, c.trials, c.successes, _num(c.success_rate),
                         _num(c.reach_time_mean_s), _num(c.reach_time_std_s)))
    return _csv_text(SUMMARY_COLUMNS, rows)


def read_summary(path) -> list:
    """Parse summary.csv back into MetricsSummary objects (one per method)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for row in rows:
        if tuple(row) != SUMMARY_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {list(row)}")
        mean = float(row["reach_time_mean_s"]) if row["reach_time_mean_s"] else None
        std = float(row["reach_time_std_s"]) if row["reach_time_std_s"] else None
        c = ClassSummary(int(row["trials"]), int(row["successes"]), mean, std)
        out.setdefault(row["method"], MetricsSummary(row["method"], {})).classes[row["class"]] = c
    return list(out.values())


# ---------------------------------------------------------------------------
# tables and curves


def results_table(summaries, classes=CLASS_NAMES):
    """Rows are (metric, method), columns are payload classes; missing cells are None."""
    rows = []
    for metric in ("Success rate", "Reach time (s)"):
        for s in summaries:
            cells = []
            for name in classes:
                c = s.classes.get(name)
                if c is None or c.trials == 0:
                    cells.append(None)
                elif metric == "Success rate":
                    cells.append(c.success_rate)
                else:
                    cells.append(c.reach_time_mean_s)
            rows.append((metric, METHOD_LABELS.get(s.method, s.method), cells))
    return rows


def _cell(v, metric):
    if v is None:
        return MISSING_CELL
    return f"{v:.3f}" if metric == "Success rate" else f"{v:.1f}"


def emit_results_table(summaries, out_dir, classes=CLASS_NAMES):
    """Write results_table.csv and results_table.txt. Returns both paths."""
    if not summaries:
        raise ValueError("need at least one summary")
    rows = results_table(summaries, classes)
    csv_rows = [(metric, method, *[_cell(v, metric) for v in cells]) for metric, method, cells in rows]
    header = ("metric", "method", *classes)
    csv_path = os.path.join(out_dir, "results_table.csv")
    txt_path = os.path.join(out_dir, "results_table.txt")
    os.makedirs(out_dir, exist_ok=True)
    atomic_write(csv_path, _csv_text(header, csv_rows))
    widths = [max(len(str(r[i])) for r in [header, *csv_rows]) for i in range(len(header))]
    lines = ["  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() for r in [header, *csv_rows]]
    atomic_write(txt_path, "\n".join(lines) + "\n")
    return csv_path, txt_path


PROGRESS_COLUMNS = ("method", "env_steps", "mean_return", "success_rate")


def merge_curves(curves: dict) -> list:
    """``{method: [rows per seed]}`` -> long-format rows averaged over seeds.

    Every method is truncated to the shortest common env-step grid.
    """
    averaged = {}
    for method, runs in curves.items():
        runs = [r for r in runs if r]
        if not runs:
            continue
        n = min(len(r) for r in runs)
        if any(len(r) != n for r in runs):
            log.warning("%s: seed curves differ in length, truncating to %d rows", method, n)
        rows = []
        for i in range(n):
            steps = runs[0][i]["env_steps"]
            ret = [r[i]["mean_return"] for r in runs if math.isfinite(r[i]["mean_return"])]
            rows.append({"method": method, "env_steps": steps,
                         "mean_return": float(np.mean(ret)) if ret else float("nan"),
                         "success_rate": float(np.mean([r[i]["success_rate"] for r in runs]))})
        averaged[method] = rows
    if not averaged:
        return []
    budget = min(rows[-1]["env_steps"] for rows in averaged.values())
    if any(rows[-1]["env_steps"] != budget for rows in averaged.values()):
        log.warning("methods have different step budgets, truncating to %d env steps", budget)
    out = []
    for rows in averaged.values():
        out.extend(r for r in rows if r["env_steps"] <= budget)
    return out


def emit_progress_curves(curve_files: dict, out_path) -> list:
    """Merge per-method curve CSVs (``{method: [paths]}``) into one long-format CSV."""
    curves = {m: [read_curves(p) for p in paths] for m, paths in curve_files.items()}
    rows = merge_curves(curves)
    atomic_write(out_path, _csv_text(PROGRESS_COLUMNS, [(r["method"], r["env_steps"], _num(r["mean_return"]),
                                                         _num(r["success_rate"])) for r in rows]))
    return rows


# ---------------------------------------------------------------------------
# bench


def method_config(cfg: ExperimentConfig, method: str) -> ExperimentConfig:
    learner = cfg.bench.learners.get(method)
    if learner is None:
        learner = cfg.learner if method == cfg.method else LEARNER_TYPES[method]()
    if cfg.bench.align_budgets and method != "dral":
        ppo = cfg.bench.learners.get("dral") or (cfg.learner if cfg.method == "dral" else PpoConfig())
        learner = replace(learner, iterations=ppo.iterations, steps_per_iteration=ppo.rollout_steps * ppo.n_envs)
    return replace(cfg, method=method, learner=learner)


def bench(cfg: ExperimentConfig, out_dir=None):
    """Train and evaluate every bench method on every seed; emit table and curves."""
    out_dir = out_dir or cfg.output_dir
    summaries, curve_files = [], {}
    for method in cfg.bench.methods:
        mcfg = method_config(cfg, method)
        records = []
        for seed in cfg.eval.seeds:
            run_dir = os.path.join(out_dir, method, f"seed{seed}")
            log.info("bench: training %s seed %d", method, seed)
            _, doc = train(mcfg, seed, run_dir)
            _, recs = run_eval(doc, mcfg, run_dir)
            records += recs
            curve_files.setdefault(method, []).append(os.path.join(run_dir, "curves.csv"))
        summaries.append(MetricsSummary.from_records(method, records))
    atomic_write(os.path.join(out_dir, "summary.csv"), summary_to_text(summaries))
    classes = [class_label(c) for c in eval_classes(cfg)]
    table = emit_results_table(summaries, out_dir, classes if classes != ["none"] else ["none"])
    emit_progress_curves(curve_files, os.path.join(out_dir, "progress_curves.csv"))
    return summaries, table


# ---------------------------------------------------------------------------
# invariant suites


def check_physics() -> list:
    failures = []
    params = ph.PhysicsParams()
    payload = ph.PayloadState(position=np.array([5.0, 4.0, 1.0]), mass=1.2,
                              inertia_diag=np.array([0.02, 0.02, 0.02]),
                              geometry=ph.PayloadGeometry("Box", (0.4, 0.4, 0.4)))
    cables = [ph.CableSpec(payload_attach=a) for a in attach_pattern(payload.geometry, 3)]
    state, speeds = ph.hover_equilibrium(payload, cables, [2.0, 2.0, 2.0], params)
    start = state.payload.position.copy()
    for _ in range(1000):
        state = ph.step_rk4(state, speeds, params, params.dt, cables)
    drift = float(np.linalg.norm(state.payload.position - start))
    if not drift < 1e-3:
        failures.append(f"hover drift {drift:.3e} m over 10 s")
    uav = ph.UavState(position=np.zeros(3), rotor_speeds=np.zeros(6))
    free = ph.SystemState([uav], None, 0.0)
    errs = []
    for dt in (0.01, 0.005):
        s = free
        for _ in range(int(round(1.0 / dt))):
            s = ph.step_rk4(s, np.zeros((1, 6)), ph.PhysicsParams(drag_coeff=0.0, dt=dt), dt)
        errs.append(abs(s.uavs[0].position[2] + 0.5 * params.g))
    if not errs[0] < 1e-6:
        failures.append(f"free-fall error {errs[0]:.3e} m")
    return failures


def check_gradients(n_nets: int = 5) -> list:
    from .nn import DenseNet, gradient_check
    rng = np.random.default_rng(0)
    failures = []
    for k in range(n_nets):
        sizes = [int(v) for v in rng.integers(2, 9, size=int(rng.integers(2, 5)))]
        net = DenseNet(sizes, rng)
        x = rng.normal(size=(3, sizes[0]))
        target = rng.normal(size=(3, sizes[-1]))

        def loss(out):
            d = out - target
            return np.sum(d * d), 2 * d
        err = gradient_check(net, loss, x)
        if not err < 1e-5:
            failures.append(f"net {sizes}: relative error {err:.3e}")
    return failures


def check_gae(n_episodes: int = 20) -> list:
    from .rl import compute_gae
    rng = np.random.default_rng(0)
    failures = []
    for _ in range(n_episodes):
        t = int(rng.integers(1, 30))
        r, v = rng.normal(size=t), rng.normal(size=t)
        dones = np.zeros(t)
        dones[-1] = 1.0
        adv, _ = compute_gae(r, v, dones, 0.0, 0.97, 1.0)
        mc = np.array([sum(0.97 ** (j - i) * r[j] for j in range(i, t)) for i in range(t)])
        if not np.allclose(adv + v, mc, atol=1e-10, rtol=0):
            failures.append("lambda=1 advantages do not match discounted returns")
        adv0, _ = compute_gae(r, v, dones, 0.0, 0.97, 0.0)
        td = r + 0.97 * np.append(v[1:], 0.0) * (1 - dones) - v
        if not np.array_equal(adv0, td):
            failures.append("lambda=0 advantages differ from TD residuals")
    return failures


# ---------------------------------------------------------------------------
# command line


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slungrl", description="Slung-payload transport learners and experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    t = sub.add_parser("train", help="train one method")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--out")
    b = sub.add_parser("bench", help="train and evaluate all methods")
    b.add_argument("--config", required=True)
    b.add_argument("--out")
    c = sub.add_parser("check", help="run an invariant suite")
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--physics", action="store_true")
    g.add_argument("--gradients", action="store_true")
    g.add_argument("--gae", action="store_true")
    m = sub.add_parser("map", help="print a sampled map")
    m.add_argument("--seed", type=int, required=True)
    m.add_argument("--difficulty", default="easy")
    return p


def _run(args) -> int:
    if args.command == "train":
        cfg = load_config(args.config)
        curve, _ = train(cfg, args.seed, args.out)
        last = curve.rows[-1] if curve.rows else None
        if last:
            print(f"trained {cfg.method}: {last['iteration']} iterations, {last['env_steps']} env steps, "
                  f"success rate {last['success_rate']:.3f}")
        return 0
    if args.command == "eval":
        cfg = load_config(args.config)
        out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
        summary, _ = run_eval(args.checkpoint, cfg, out)
        sys.stdout.write(summary_to_text([summary]))
        return 0
    if args.command == "bench":
        cfg = load_config(args.config)
        _, (_, txt) = bench(cfg, args.out)
        with open(txt) as fh:
            sys.stdout.write(fh.read())
        return 0
    if args.command == "check":
        suite = check_physics if args.physics else check_gradients if args.gradients else check_gae
        failures = suite()
        for f in failures:
            print(f"FAIL {f}")
        print("ok" if not failures else f"{len(failures)} failure(s)")
        return 0 if not failures else 2
    if args.command == "map":
        try:
            grid = sample_map(args.seed, args.difficulty)
        except ValueError:
            raise UserError(f"unknown difficulty {args.difficulty!r}") from None
        sys.stdout.write(grid.to_text())
        return 0
    raise UserError("missing subcommand")


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UserError("missing subcommand")
        return _run(args)
    except (UserError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli())
