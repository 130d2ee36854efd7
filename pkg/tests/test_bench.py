import csv
import json
import math

import numpy as np
import pytest

from armplan import cli
from armplan.baselines import path_violations
from armplan.bench import (
    EXPORT_FIELDS, TRIAL_FIELDS, ExperimentDef, MissingArtifact, SuiteConfig, TrialRecord,
    export_trajectory, load_experiment, load_reference, path_length, read_trials_csv,
    run_suite, run_trial, summarize,
)
from armplan.kinematics import fk_matrix, load_robot
from armplan.policy import NetworkSpec, init_params, save_checkpoint


@pytest.fixture(scope="module")
def random_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "random.ckpt"
    save_checkpoint(init_params(NetworkSpec(), seed=0), path)
    return str(path)


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def same_record(a, b):
    ra, rb = a.as_row(), b.as_row()
    ra.pop("planner_compute_s")
    rb.pop("planner_compute_s")
    return ra == rb


# --- path length ----------------------------------------------------------------------

def test_path_length_cases():
    assert path_length(np.zeros((1, 3))) == 0
    assert path_length(np.array([[0, 0, 0], [0.6, 0.8, 0]])) == pytest.approx(1.0)
    sq = np.array([[0, 0, 0], [0.1, 0, 0], [0.1, 0.1, 0], [0, 0.1, 0], [0, 0, 0]])
    assert path_length(sq) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        path_length(np.zeros((0, 3)))


# --- experiment definitions ---------------------------------------------------------------

@pytest.mark.parametrize("exp_id", range(1, 8))
def test_experiment_invariants(exp_id):
    exp = load_experiment(exp_id)
    assert exp.robot == ("ur5" if exp_id <= 3 else "kr16")
    assert exp.scene.dynamic == (exp_id == 3)
    assert len(exp.goals) == (2 if exp_id == 2 else 1)
    assert exp.trials == 30


def test_experiment_rejects_wrong_robot():
    exp = load_experiment(1)
    with pytest.raises(ValueError):
        ExperimentDef(1, "kr16", exp.scene, exp.start, exp.goals)
    with pytest.raises(ValueError):
        load_experiment(8)


def test_trial_record_invariants():
    with pytest.raises(ValueError):
        TrialRecord(1, "rrt", 0, True, True, 1.0, 0.1, 1.0, 60)
    with pytest.raises(ValueError):
        TrialRecord(1, "rrt", 0, False, False, -1.0, 0.1, 1.0, 60)
    r = TrialRecord(1, "rrt", 3, True, False, 1.5, 0.25, 2.0, 120)
    assert TrialRecord.from_row({k: str(v) for k, v in r.as_row().items()}).as_row() == r.as_row()


# --- single trials ---------------------------------------------------------------------------

@pytest.mark.parametrize("planner", ["rrt", "birrt"])
def test_sampling_trial_dump_rechecked(planner, tmp_path):
    exp = load_experiment(1)
    dump = tmp_path / "t.jsonl"
    rec = run_trial(exp, planner, 7, trajectory_path=str(dump))
    assert rec.success and not rec.collision
    steps = [r for r in read_jsonl(dump) if r["event"] == "step"]
    assert len(steps) == rec.steps + 1
    Q = np.array([s["q"] for s in steps])
    model = load_robot("ur5")
    assert path_violations(model, exp.scene, Q, 0.001) == 0
    tip = fk_matrix(model, Q[-1])[:3, 3]
    assert np.linalg.norm(tip - exp.goals[-1]) <= 0.01
    assert np.allclose(steps[-1]["ee_position"], tip)
    assert path_length(np.array([s["ee_position"] for s in steps])) == pytest.approx(rec.path_length_m)


def test_two_goal_experiment_chains_segments():
    exp = load_experiment(2)
    rec = run_trial(exp, "birrt", 0)
    assert rec.success
    assert rec.final_error_m <= 0.01
    assert rec.sim_exec_s == pytest.approx(rec.steps * 1 / 60)


def test_sampling_trial_deterministic():
    exp = load_experiment(1)
    assert same_record(run_trial(exp, "rrt", 5), run_trial(exp, "rrt", 5))


def test_dynamic_experiment_baseline_fails():
    rec = run_trial(load_experiment(3), "rrt", 0)
    assert not rec.success


def test_drl_requires_checkpoint(tmp_path):
    exp = load_experiment(1)
    with pytest.raises(ValueError):
        run_trial(exp, "drl", 0)
    with pytest.raises(MissingArtifact):
        run_trial(exp, "drl", 0, checkpoint=str(tmp_path / "nope.ckpt"))
    with pytest.raises(ValueError):
        run_trial(exp, "prm", 0)


def test_drl_trial_with_untrained_policy(random_ckpt, tmp_path):
    exp = load_experiment(1)
    log = tmp_path / "ep.jsonl"
    a = run_trial(exp, "drl", 0, checkpoint=random_ckpt, trajectory_path=str(log))
    b = run_trial(exp, "drl", 0, checkpoint=random_ckpt)
    assert same_record(a, b)
    assert not (a.success and a.collision)
    assert a.sim_exec_s == pytest.approx(a.steps / 60)
    assert a.planner_compute_s > 0
    n = export_trajectory(log, tmp_path / "ep.csv")
    assert n == a.steps
    with open(tmp_path / "ep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == EXPORT_FIELDS and len(rows) == n


# --- summaries --------------------------------------------------------------------------------

def test_summarize_means_over_successes():
    recs = [TrialRecord(1, "rrt", 0, True, False, 1.0, 0.5, 2.0, 120),
            TrialRecord(1, "rrt", 1, True, False, 2.0, 1.5, 3.0, 180),
            TrialRecord(1, "rrt", 2, False, True, 9.0, 9.0, 9.0, 540)]
    (cell,) = summarize(recs)
    assert cell["successes"] == 2 and cell["success_rate"] == pytest.approx(2 / 3)
    assert cell["collision_rate"] == pytest.approx(1 / 3)
    assert cell["path_length_m"]["mean"] == 1.5 and cell["path_length_m"]["std"] == 0.5
    assert cell["exec_total_s"]["mean"] == 3.5
    ref = cell["reference"]
    assert ref["path_length_m"] == 3.88 and ref["exec_time_s"] == 3.38
    assert ref["path_length_delta_m"] == pytest.approx(1.5 - 3.88)


def test_summarize_all_failed_cell():
    (cell,) = summarize([TrialRecord(4, "birrt", 0, False, False, 0.0, 1.0, 0.0, 0)])
    assert cell["path_length_m"]["mean"] is None
    assert cell["reference"]["path_length_delta_m"] is None


def test_reference_table_complete():
    ref = load_reference()
    assert ref[(1, "drl")]["path_length_m"] == 0.45
    assert ref[(1, "rrt")]["path_length_m"] == 3.88
    assert {e for e, _ in ref} == set(range(1, 8))


# --- suites -----------------------------------------------------------------------------------

def test_suite_single_trial(random_ckpt, tmp_path):
    cfg = SuiteConfig(experiments=(1,), trials=1, checkpoints={"ur5": random_ckpt})
    report = run_suite(cfg, out_dir=tmp_path)
    rows = read_trials_csv(tmp_path / "trials.csv")
    assert sorted(r.planner for r in rows) == ["birrt", "drl", "rrt"]
    with open(tmp_path / "trials.csv") as fh:
        assert next(csv.reader(fh)) == TRIAL_FIELDS
    saved = json.loads((tmp_path / "report.json").read_text())
    assert len(saved["cells"]) == 3
    for cell in saved["cells"]:
        mine = [r for r in rows if r.planner == cell["planner"] and r.success]
        for key in ("path_length_m", "planner_compute_s", "sim_exec_s"):
            want = math.fsum(getattr(r, key) for r in mine) / len(mine) if mine else None
            assert cell[key]["mean"] == want
        assert "reference" in cell
    assert "0.45" in report["text"] and "3.88" in report["text"]
    assert (tmp_path / "report.txt").read_text().startswith(report["text"])


def test_suite_deterministic_with_seed_list(tmp_path):
    cfg = SuiteConfig(experiments=(1,), planners=("rrt", "birrt"), seeds=(3, 11))
    a = run_suite(cfg)["records"]
    b = run_suite(cfg)["records"]
    assert [r.seed for r in a] == [3, 11, 3, 11]
    assert all(same_record(x, y) for x, y in zip(a, b))


def test_suite_parallel_matches_serial():
    cfg = SuiteConfig(experiments=(1,), planners=("birrt",), trials=2)
    serial = run_suite(cfg)["records"]
    parallel = run_suite(SuiteConfig(experiments=(1,), planners=("birrt",), trials=2,
                                     workers=2))["records"]
    assert all(same_record(x, y) for x, y in zip(serial, parallel))


def test_suite_missing_checkpoint(tmp_path):
    cfg = SuiteConfig(experiments=(1,), trials=1, checkpoints={"ur5": str(tmp_path / "x")})
    with pytest.raises(MissingArtifact):
        run_suite(cfg)
    with pytest.raises(MissingArtifact):
        run_suite(SuiteConfig(experiments=(4,), trials=1, checkpoints={}))


def test_suite_config_validation_and_paths(tmp_path):
    with pytest.raises(ValueError):
        SuiteConfig(experiments=(9,))
    with pytest.raises(ValueError):
        SuiteConfig(planners=("prm",))
    with pytest.raises(ValueError):
        SuiteConfig(trials=0)
    p = tmp_path / "suite.json"
    p.write_text(json.dumps({"experiments": [1], "trials": 2,
                             "checkpoints": {"ur5": "ck/ur5.ckpt", "kr16": "bundled:kr16"}}))
    cfg = SuiteConfig.load(p)
    assert cfg.checkpoints["ur5"] == str(tmp_path / "ck/ur5.ckpt")
    assert cfg.checkpoints["kr16"] == "bundled:kr16"
    assert cfg.experiments == (1,) and cfg.seed_list == (0, 1)


# --- command line ---------------------------------------------------------------------------------

def test_cli_eval_without_checkpoint(capsys):
    assert cli.main(["eval", "--experiment", "1"]) != 0
    assert "checkpoint" in capsys.readouterr().err


def test_cli_plan_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert cli.main(["plan", "--planner", "rrt", "--experiment", "1", "--seed", "7",
                         "--out", str(out)]) == 0
    assert a.read_text() == b.read_text()
    row = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert row["success"] == 1
    assert cli.main(["export-traj", str(a), "--out", str(tmp_path / "a.csv")]) == 0
    with open(tmp_path / "a.csv") as fh:
        assert len(list(csv.DictReader(fh))) == row["steps"] + 1


def test_cli_plan_drl_needs_checkpoint(capsys):
    assert cli.main(["plan", "--planner", "drl", "--experiment", "1"]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_cli_bench_config(tmp_path, capsys):
    cfg = tmp_path / "suite.json"
    cfg.write_text(json.dumps({"experiments": [1], "planners": ["birrt"], "trials": 1}))
    out = tmp_path / "report"
    assert cli.main(["bench", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "trials.csv").is_file() and (out / "report.json").is_file()
    assert "NC-RRT proxy" in capsys.readouterr().out


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none"), "--experiment", "1"]) == 1
    assert "not found" in capsys.readouterr().err
    assert cli.main(["plan", "--planner", "rrt", "--experiment", "9"]) == 1
    assert cli.main([]) != 0
