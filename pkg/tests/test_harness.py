import csv
import logging
import math

import pytest
import yaml

from slungrl import harness as H
from slungrl.env import ConfigError
from slungrl.rl import CURVE_COLUMNS, PpoConfig


def tiny_config(method="dral", **env):
    env_block = {"max_steps": 15, "difficulty": "easy", **env}
    learner = {
        "dral": {"rollout_steps": 16, "n_envs": 1, "minibatch": 16, "epochs": 1, "iterations": 2,
                 "hidden": [8]},
        "qlearning": {"iterations": 2, "steps_per_iteration": 16},
        "sarsa": {"iterations": 2, "steps_per_iteration": 16},
        "dqn": {"iterations": 2, "steps_per_iteration": 16, "batch": 4, "learning_starts": 4,
                "hidden": [8], "capacity": 64},
    }[method]
    return H.config_from_dict({"method": method, "env": env_block, "learner": learner,
                               "eval": {"n_trials": 2, "classes": ["Box"], "seeds": [0]}})


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


# -- config ------------------------------------------------------------------------


def test_minimal_config_is_fully_populated(tmp_path):
    cfg = H.load_config(write_yaml(tmp_path / "c.yaml", {"method": "sarsa"}))
    assert isinstance(cfg.learner, H.TabularLearner)
    assert cfg.eval.seeds == (0, 1, 2)
    assert cfg.env.payload_class == "Box" and cfg.physics.dt == 0.01


def test_unknown_key_is_named(tmp_path):
    path = write_yaml(tmp_path / "c.yaml", {"env": {"vmax_typo": 3.0}})
    with pytest.raises(ConfigError, match="env.vmax_typo"):
        H.load_config(path)


@pytest.mark.parametrize("data, where", [
    ({"learner": {"clip_typo": 0.1}}, "learner.clip_typo"),
    ({"physics": {"gravity": 9.8}}, "physics.gravity"),
    ({"bench": {"learners": {"ppo": {}}}}, "bench.learners.ppo"),
    ({"top_typo": 1}, "top_typo"),
])
def test_unknown_keys_everywhere(data, where):
    with pytest.raises(ConfigError, match=where):
        H.config_from_dict(data)


def test_schema_violations():
    with pytest.raises(ConfigError, match="env.max_steps"):
        H.config_from_dict({"env": {"max_steps": "many"}})
    with pytest.raises(ConfigError, match="method"):
        H.config_from_dict({"method": "a2c"})
    with pytest.raises(ConfigError, match="eval.seeds"):
        H.config_from_dict({"eval": {"seeds": []}})


def test_yaml_error_reports_line_and_column(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("method: dral\nenv:\n  max_steps: [1, 2\n")
    with pytest.raises(ConfigError, match=r"bad\.yaml:\d+:\d+"):
        H.load_config(str(path))


@pytest.mark.parametrize("method", H.METHODS)
def test_config_round_trip(tmp_path, method):
    cfg = tiny_config(method)
    cfg.bench.learners["dral"] = PpoConfig(iterations=3)
    path = tmp_path / "c.yaml"
    H.save_config(cfg, path)
    assert H.load_config(path) == cfg


# -- metrics -----------------------------------------------------------------------


def records(outcomes, cls="Box"):
    return [H.TrialRecord(k, cls, o, 1.5 + k if o == "success" else None, 10, 1.0) for k, o in enumerate(outcomes)]


def test_counting_eight_of_ten():
    s = H.MetricsSummary.from_records("dral", records(["success"] * 8 + ["collision", "timeout"]))
    assert s.classes["Box"].success_rate == 0.8
    assert s.classes["Box"].trials == 10


def test_all_timeouts_leave_reach_empty(tmp_path):
    s = H.MetricsSummary.from_records("dral", records(["timeout"] * 4))
    c = s.classes["Box"]
    assert c.success_rate == 0 and c.reach_time_mean_s is None
    text = H.summary_to_text([s])
    row = list(csv.DictReader(text.splitlines()))[0]
    assert row["reach_time_mean_s"] == "" and row["reach_time_std_s"] == ""


def test_trial_record_reach_iff_success():
    with pytest.raises(ValueError):
        H.TrialRecord(0, "Box", "success", None, 3, 0.0)
    with pytest.raises(ValueError):
        H.TrialRecord(0, "Box", "crash", 2.0, 3, 0.0)
    with pytest.raises(ValueError):
        H.TrialRecord(0, "Box", "exploded", None, 3, 0.0)


def test_summary_round_trip(tmp_path):
    s = H.MetricsSummary.from_records("sarsa", records(["success", "crash", "success"]))
    path = tmp_path / "summary.csv"
    path.write_text(H.summary_to_text([s]))
    back = H.read_summary(path)
    assert back[0].method == "sarsa"
    assert back[0].classes["Box"].successes == 2
    assert back[0].classes["Box"].reach_time_mean_s == pytest.approx(2.5)


# -- tables ------------------------------------------------------------------------


def test_single_method_single_class_table(tmp_path):
    s = H.MetricsSummary.from_records("dral", records(["success", "timeout"]))
    csv_path, txt_path = H.emit_results_table([s], tmp_path, ["Box"])
    rows = list(csv.reader(open(csv_path)))
    assert rows[0] == ["metric", "method", "Box"]
    assert [r[0] for r in rows[1:]] == ["Success rate", "Reach time (s)"]
    assert rows[1][2] == "0.500" and rows[2][2] == "1.5"
    assert "DRAL" in open(txt_path).read()


def test_four_methods_three_classes_grid_with_missing_cells(tmp_path):
    summaries = []
    for m in H.METHODS:
        recs = records(["success"]) + records(["timeout"], "Package")
        summaries.append(H.MetricsSummary.from_records(m, recs))
    csv_path, _ = H.emit_results_table(summaries, tmp_path)
    rows = list(csv.reader(open(csv_path)))
    assert rows[0] == ["metric", "method", "Box", "Package", "Bucket"]
    body = rows[1:]
    assert len(body) == 8 and all(len(r) == 5 for r in body)
    assert [r[1] for r in body[:4]] == [H.METHOD_LABELS[m] for m in H.METHODS]
    assert all(r[4] == H.MISSING_CELL for r in body)
    # a class with no successes has no reach time
    assert all(r[3] == H.MISSING_CELL for r in body[4:])


def test_empty_summaries_rejected(tmp_path):
    with pytest.raises(ValueError):
        H.emit_results_table([], tmp_path)


# -- curves ------------------------------------------------------------------------


def curve(steps, ret=1.0):
    return [{"env_steps": s, "mean_return": ret, "success_rate": 0.5} for s in steps]


def test_merge_single_method_passes_through():
    rows = H.merge_curves({"dral": [curve([10, 20], 2.0)]})
    assert rows == [{"method": "dral", "env_steps": 10, "mean_return": 2.0, "success_rate": 0.5},
                    {"method": "dral", "env_steps": 20, "mean_return": 2.0, "success_rate": 0.5}]


def test_merge_averages_seeds_on_a_shared_grid():
    rows = H.merge_curves({m: [curve([10, 20], 1.0), curve([10, 20], 3.0)] for m in H.METHODS})
    assert len(rows) == 8
    assert {r["mean_return"] for r in rows} == {2.0}
    grids = {m: [r["env_steps"] for r in rows if r["method"] == m] for m in H.METHODS}
    assert len({tuple(g) for g in grids.values()}) == 1


def test_merge_truncates_mismatched_budgets(caplog):
    with caplog.at_level(logging.WARNING):
        rows = H.merge_curves({"dral": [curve([10, 20, 30])], "dqn": [curve([10, 20])]})
    assert max(r["env_steps"] for r in rows) == 20
    assert len(rows) == 4
    assert "truncating" in caplog.text


def test_merge_ignores_nan_returns():
    a = curve([10])
    a[0]["mean_return"] = math.nan
    rows = H.merge_curves({"dral": [a, curve([10], 4.0)]})
    assert rows[0]["mean_return"] == 4.0


# -- train / eval ------------------------------------------------------------------


@pytest.mark.parametrize("method", H.METHODS)
def test_train_then_eval_each_method(tmp_path, method):
    cfg = tiny_config(method)
    curve, doc = H.train(cfg, 0, tmp_path)
    header = next(csv.reader(open(tmp_path / "curves.csv")))
    assert tuple(header) == ("method", *CURVE_COLUMNS)
    assert (tmp_path / "timing.csv").exists()
    assert doc["method"] == method
    summary, recs = H.run_eval(str(tmp_path / "checkpoint.json"), cfg, tmp_path)
    assert len(recs) == 2
    c = summary.classes["Box"]
    assert c.success_rate == sum(r.outcome == "success" for r in recs) / 2
    assert (tmp_path / "trials.csv").exists() and (tmp_path / "summary.csv").exists()


def test_eval_method_mismatch(tmp_path):
    cfg = tiny_config("qlearning")
    _, doc = H.train(cfg, 0, tmp_path)
    with pytest.raises(H.UserError, match="does not match"):
        H.run_eval(doc, tiny_config("sarsa"))


def test_eval_is_reproducible(tmp_path):
    cfg = tiny_config("qlearning")
    H.train(cfg, 0, tmp_path)
    H.run_eval(str(tmp_path / "checkpoint.json"), cfg, tmp_path / "a")
    H.run_eval(str(tmp_path / "checkpoint.json"), cfg, tmp_path / "b")
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()


def test_method_config_aligns_budgets():
    cfg = tiny_config("dral")
    q = H.method_config(cfg, "qlearning")
    assert q.learner.iterations == cfg.learner.iterations
    assert q.learner.steps_per_iteration == cfg.learner.rollout_steps * cfg.learner.n_envs


# -- cli ---------------------------------------------------------------------------


def test_cli_check_gradients_ok(capsys):
    assert H.cli(["check", "--gradients"]) == 0
    assert "ok" in capsys.readouterr().out


def test_cli_map_prints_grid(capsys):
    assert H.cli(["map", "--seed", "3", "--difficulty", "medium"]) == 0
    assert capsys.readouterr().out.count("\n") > 10


@pytest.mark.parametrize("argv", [[], ["fly"], ["map", "--seed", "1", "--difficulty", "extreme"],
                                  ["train", "--bogus"], ["check"]])
def test_cli_user_errors_exit_one(argv):
    assert H.cli(argv) == 1


def test_cli_eval_missing_checkpoint(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", {"method": "dral"})
    assert H.cli(["eval", "--checkpoint", str(tmp_path / "nope.json"), "--config", cfg]) == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_cli_missing_config(tmp_path):
    assert H.cli(["train", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_cli_bench_smoke(tmp_path, capsys):
    cfg = H.config_to_dict(tiny_config("dral"))
    cfg["bench"]["methods"] = ["dral", "qlearning"]
    cfg["learner"]["iterations"] = 1
    path = write_yaml(tmp_path / "bench.yaml", cfg)
    assert H.cli(["bench", "--config", path, "--out", str(tmp_path / "out")]) == 0
    out = tmp_path / "out"
    rows = list(csv.reader(open(out / "results_table.csv")))
    assert len(rows) == 1 + 2 * 2
    prog = list(csv.DictReader(open(out / "progress_curves.csv")))
    assert {r["method"] for r in prog} == {"dral", "qlearning"}
    assert tuple(prog[0]) == H.PROGRESS_COLUMNS
    assert H.read_summary(out / "summary.csv")
    assert "Success rate" in capsys.readouterr().out
