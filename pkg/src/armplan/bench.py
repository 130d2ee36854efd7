"""Benchmark harness: experiment definitions, single trials, suites and reports."""

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import rotations as rot
from .baselines import (
    PlannerParams, PlanningFailure, RuntimeCollision, birrt_plan, ee_path_length, execute_path,
    goal_config, rrt_plan,
)
from .env import DT, EnvConfig, ReachEnv
from .kinematics import fk_matrix, link_frames, load_robot
from .policy import PolicyParams, forward, load_checkpoint
from .scene import advance, load_scene

PLANNERS = ("drl", "rrt", "birrt")
PLANNER_LABELS = {"drl": "DRL", "rrt": "RRT", "birrt": "NC-RRT proxy (Bi-RRT)"}
TRIAL_FIELDS = ["experiment", "planner", "seed", "success", "collision", "path_length_m",
                "planner_compute_s", "sim_exec_s", "steps"]
ROBOT_OF_EXPERIMENT = {1: "ur5", 2: "ur5", 3: "ur5", 4: "kr16", 5: "kr16", 6: "kr16", 7: "kr16"}


class MissingArtifact(FileNotFoundError):
    pass


# --- experiments ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExperimentDef:
    id: int
    robot: str
    scene: object
    start: np.ndarray
    goals: tuple
    trials: int = 30
    planners: tuple = PLANNERS

    def __post_init__(self):
        if self.id not in ROBOT_OF_EXPERIMENT:
            raise ValueError(f"unknown experiment {self.id}")
        if self.robot != ROBOT_OF_EXPERIMENT[self.id]:
            raise ValueError(f"experiment {self.id} uses {ROBOT_OF_EXPERIMENT[self.id]}")
        if self.id == 3 and not self.scene.dynamic:
            raise ValueError("experiment 3 needs a moving obstacle")
        if not self.goals:
            raise ValueError("experiment without goals")

    @property
    def task(self):
        return f"exp{self.id}"

    @property
    def start_tip(self):
        return fk_matrix(load_robot(self.robot), self.start)[:3, 3]


def load_experiment(exp_id, trials=30, planners=PLANNERS):
    exp_id = int(exp_id)
    if exp_id not in ROBOT_OF_EXPERIMENT:
        raise ValueError(f"experiment must be 1-7, got {exp_id}")
    scene = load_scene(f"exp{exp_id}")
    return ExperimentDef(exp_id, scene.robot, scene, np.asarray(scene.start_config, float),
                         tuple(scene.goals), trials, tuple(planners))


# --- trial records ---------------------------------------------------------------------

@dataclass
class TrialRecord:
    experiment: int
    planner: str
    seed: int
    success: bool
    collision: bool
    path_length_m: float
    planner_compute_s: float
    sim_exec_s: float
    steps: int
    detail: str = ""
    final_error_m: float = float("nan")

    def __post_init__(self):
        if self.success and self.collision:
            raise ValueError("a trial cannot both succeed and collide")
        if self.path_length_m < 0 or self.sim_exec_s < 0 or self.steps < 0:
            raise ValueError("lengths and times must be >= 0")

    def as_row(self):
        d = {k: getattr(self, k) for k in TRIAL_FIELDS}
        d["success"] = int(d["success"])
        d["collision"] = int(d["collision"])
        return d

    @classmethod
    def from_row(cls, row):
        return cls(int(row["experiment"]), row["planner"], int(row["seed"]),
                   bool(int(row["success"])), bool(int(row["collision"])),
                   float(row["path_length_m"]), float(row["planner_compute_s"]),
                   float(row["sim_exec_s"]), int(row["steps"]))


def path_length(trajectory):
    """End-effector path length in metres of a trajectory or an (N, 3) position array."""
    pos = getattr(trajectory, "ee_positions", trajectory)
    pos = np.asarray(pos, float)
    if pos.ndim != 2 or pos.shape[1] != 3 or len(pos) < 1:
        raise ValueError("expected at least one 3-D position")
    return ee_path_length(pos)


# --- single trials -----------------------------------------------------------------------

def _resolve_checkpoint(ref):
    if isinstance(ref, PolicyParams):
        return ref
    s = str(ref)
    if s.startswith("bundled:"):
        name = s.split(":", 1)[1]
        res = resources.files("armplan.data").joinpath("checkpoints", f"{name}.ckpt")
        if not res.is_file():
            raise MissingArtifact(f"bundled checkpoint {name!r} is not installed")
        with resources.as_file(res) as p:
            return load_checkpoint(p)
    if not Path(s).is_file():
        raise MissingArtifact(f"checkpoint not found: {s}")
    return load_checkpoint(s)


def _run_drl(exp, seed, policy, d_th, dt, start_jitter, trajectory_path):
    cfg = EnvConfig(robot=exp.robot, task=exp.task, dt=dt, eval_threshold=d_th,
                    start_jitter=start_jitter)
    env = ReachEnv(cfg, log_path=trajectory_path)
    try:
        state, obs = env.reset(seed=seed)
        positions = [state.ee[:3, 3].copy()]
        compute = 0.0
        done = False
        while not done:
            t0 = time.perf_counter()
            means, _ = forward(policy, obs.vector[None])
            compute += time.perf_counter() - t0
            state, obs, _, done, info = env.step(means[0].astype(float))
            positions.append(state.ee[:3, 3].copy())
    finally:
        env.close()
    err = float(np.linalg.norm(state.goals[-1] - positions[-1]))
    return TrialRecord(exp.id, "drl", seed, state.outcome == "success",
                       state.outcome == "collision", ee_path_length(positions), compute,
                       state.step_count * dt, state.step_count, detail=state.outcome,
                       final_error_m=err)


def _write_joint_trajectory(path, model, parts, header):
    with open(path, "w") as fh:
        fh.write(json.dumps({"event": "reset", **header}) + "\n")
        k = 0
        prev = None
        for traj in parts:
            frames = link_frames(model, traj.configs)
            for i in range(len(traj)):
                if prev is not None and i == 0:
                    continue            # segment joints repeat the previous end point
                q = traj.configs[i]
                action = np.zeros_like(q) if prev is None else q - prev
                ee = frames[i, -1]
                fh.write(json.dumps({
                    "event": "step", "step": k, "t": float(traj.times[i]), "q": q.tolist(),
                    "ee_position": ee[:3, 3].tolist(),
                    "ee_rpy": rot.matrix_to_rpy(ee[:3, :3]).tolist(),
                    "action": action.tolist(), "reward": None}) + "\n")
                prev = q
                k += 1
        fh.write(json.dumps({"event": "end", "outcome": header.get("outcome")}) + "\n")


def _run_sampling(exp, planner, seed, params, d_th, dt, trajectory_path):
    model = load_robot(exp.robot)
    plan = rrt_plan if planner == "rrt" else birrt_plan
    q = exp.start.copy()
    t_sim = 0.0
    compute = 0.0
    steps = 0
    parts = []
    outcome = "success"
    collision = False
    detail = ""
    for k, goal in enumerate(exp.goals):
        T = fk_matrix(model, q).copy()
        T[:3, 3] = goal
        snapshot = advance(exp.scene, t_sim) if exp.scene.dynamic else exp.scene
        t0 = time.perf_counter()
        try:
            q_goal = goal_config(model, snapshot, T, q_seed=q,
                                 rng=np.random.default_rng([seed, k]))
            path = plan(model, snapshot, q, q_goal, replace(params, seed=seed + 1000 * k))
        except PlanningFailure as exc:
            compute += time.perf_counter() - t0
            outcome, detail = "planning_failure", f"goal {k}: {exc}"
            break
        compute += time.perf_counter() - t0
        try:
            traj, metrics = execute_path(model, exp.scene, path, dt=dt, start_time=t_sim)
        except RuntimeCollision as exc:
            if exc.trajectory is not None:
                parts.append(exc.trajectory)
                steps += len(exc.trajectory) - 1
            outcome, collision, detail = "collision", True, f"goal {k}: {exc}"
            break
        parts.append(traj)
        steps += metrics["steps"]
        t_sim += metrics["sim_exec_s"]
        q = path.configs[-1]
    positions = [exp.start_tip] if not parts else \
        [parts[0].ee_positions[0]] + [p for tr in parts for p in tr.ee_positions[1:]]
    err = float(np.linalg.norm(exp.goals[-1] - positions[-1]))
    success = outcome == "success" and err <= d_th
    if outcome == "success" and not success:
        outcome, detail = "missed_goal", f"final error {err:.4f} m"
    if trajectory_path:
        _write_joint_trajectory(trajectory_path, model, parts,
                                {"experiment": exp.id, "planner": planner, "seed": seed,
                                 "outcome": outcome})
    return TrialRecord(exp.id, planner, seed, success, collision,
                       ee_path_length(np.array(positions)), compute, steps * dt, steps,
                       detail=detail or outcome, final_error_m=err)


def run_trial(exp, planner, seed, checkpoint=None, planner_params=None, d_th=0.01, dt=DT,
              start_jitter=0.0, trajectory_path=None):
    """One benchmark trial. Planner failures come back as unsuccessful records."""
    if planner not in PLANNERS:
        raise ValueError(f"planner must be one of {PLANNERS}")
    if planner == "drl":
        if checkpoint is None:
            raise ValueError("the DRL planner needs a checkpoint")
        policy = _resolve_checkpoint(checkpoint)
        return _run_drl(exp, seed, policy, d_th, dt, start_jitter, trajectory_path)
    params = planner_params if isinstance(planner_params, PlannerParams) \
        else PlannerParams(**(planner_params or {}))
    return _run_sampling(exp, planner, seed, params, d_th, dt, trajectory_path)


# --- suites ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class SuiteConfig:
    experiments: tuple = (1, 2, 3, 4, 5, 6, 7)
    planners: tuple = PLANNERS
    trials: int = 30
    seeds: tuple = None
    checkpoints: dict = field(default_factory=lambda: {"ur5": "bundled:ur5",
                                                       "kr16": "bundled:kr16"})
    planner_params: dict = field(default_factory=dict)
    d_th: float = 0.01
    dt: float = DT
    start_jitter: float = 0.0
    workers: int = 1
    dump_trajectories: bool = False

    def __post_init__(self):
        for e in self.experiments:
            if e not in ROBOT_OF_EXPERIMENT:
                raise ValueError(f"unknown experiment {e}")
        for p in self.planners:
            if p not in PLANNERS:
                raise ValueError(f"unknown planner {p!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        object.__setattr__(self, "experiments", tuple(self.experiments))
        object.__setattr__(self, "planners", tuple(self.planners))
        if self.seeds is not None:
            object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def seed_list(self):
        return self.seeds if self.seeds is not None else tuple(range(self.trials))

    def to_json(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text())
        base = Path(path).parent
        ck = data.get("checkpoints")
        if ck:
            data["checkpoints"] = {k: v if str(v).startswith("bundled:") or Path(v).is_absolute()
                                   else str(base / v) for k, v in ck.items()}
        return cls(**data)


def _job(args):
    exp_id, planner, seed, cfg, dump_dir = args
    exp = load_experiment(exp_id)
    ckpt = cfg.checkpoints.get(exp.robot) if planner == "drl" else None
    traj = str(Path(dump_dir) / f"exp{exp_id}_{planner}_s{seed}.jsonl") if dump_dir else None
    return run_trial(exp, planner, seed, checkpoint=_policy_cache(ckpt), d_th=cfg.d_th,
                     dt=cfg.dt, planner_params=cfg.planner_params,
                     start_jitter=cfg.start_jitter, trajectory_path=traj)


_POLICIES = {}


def _policy_cache(ref):
    if ref is None:
        return None
    if ref not in _POLICIES:
        _POLICIES[ref] = _resolve_checkpoint(ref)
    return _POLICIES[ref]


def load_reference():
    text = resources.files("armplan.data").joinpath("table3_reference.csv").read_text()
    out = {}
    for row in csv.DictReader(text.splitlines()):
        out[(int(row["experiment"]), row["planner"])] = {
            "exec_time_s": float(row["exec_time_s"]), "path_length_m": float(row["path_length_m"])}
    return out


def _stats(values):
    if not values:
        return {"mean": None, "std": None}
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return {"mean": mean, "std": math.sqrt(var)}


def summarize(records, reference=None):
    """Per-cell means over successful trials, rates over all trials, and reference deltas."""
    reference = load_reference() if reference is None else reference
    cells = {}
    for r in records:
        cells.setdefault((r.experiment, r.planner), []).append(r)
    out = []
    for (e, p), rs in sorted(cells.items(), key=lambda kv: (kv[0][0], PLANNERS.index(kv[0][1]))):
        ok = [r for r in rs if r.success]
        cell = {"experiment": e, "planner": p, "label": PLANNER_LABELS[p], "trials": len(rs),
                "successes": len(ok), "success_rate": len(ok) / len(rs),
                "collision_rate": sum(r.collision for r in rs) / len(rs)}
        for key in ("path_length_m", "planner_compute_s", "sim_exec_s"):
            cell[key] = _stats([getattr(r, key) for r in ok])
        cell["exec_total_s"] = _stats([r.planner_compute_s + r.sim_exec_s for r in ok])
        ref = reference.get((e, p))
        if ref:
            mine_t = cell["exec_total_s"]["mean"]
            mine_l = cell["path_length_m"]["mean"]
            cell["reference"] = {
                **ref,
                "exec_time_delta_s": None if mine_t is None else mine_t - ref["exec_time_s"],
                "path_length_delta_m": None if mine_l is None else mine_l - ref["path_length_m"],
                "path_length_ratio": None if mine_l is None else mine_l / ref["path_length_m"]}
        out.append(cell)
    return out


def _flags(cells):
    flags = []
    for c in cells:
        if c["experiment"] == 3:
            if c["planner"] == "drl" and c["success_rate"] < 0.7:
                flags.append(f"exp 3 DRL success {c['success_rate']:.2f} below 0.70; "
                             "the checkpoint underperforms on the moving plate")
            if c["planner"] != "drl" and c["success_rate"] > 0.2:
                flags.append(f"exp 3 {c['label']} succeeded in {c['success_rate']:.2f} of trials")
        elif c["planner"] != "drl" and c["success_rate"] < 0.9:
            flags.append(f"exp {c['experiment']} {c['label']} planning success "
                         f"{c['success_rate']:.2f} below 0.90")
    return flags


def format_table(cells):
    def f(v, nd=2):
        return "/" if v is None else f"{v:.{nd}f}"
    lines = ["exp  planner                  succ   exec[s] (ref)    compute[s]  path[m] (ref)",
             "---  -----------------------  -----  ---------------  ----------  -------------"]
    for c in cells:
        ref = c.get("reference", {})
        lines.append(
            f"{c['experiment']:>3}  {c['label']:<23}  {c['successes']:>2}/{c['trials']:<2}  "
            f"{f(c['exec_total_s']['mean']):>6} ({f(ref.get('exec_time_s'))})  "
            f"{f(c['planner_compute_s']['mean'], 3):>10}  "
            f"{f(c['path_length_m']['mean']):>5} ({f(ref.get('path_length_m'))})")
    return "\n".join(lines)


def write_trials_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, TRIAL_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.as_row())


def read_trials_csv(path):
    with open(path, newline="") as fh:
        return [TrialRecord.from_row(row) for row in csv.DictReader(fh)]


def run_suite(config=None, out_dir=None, progress=None):
    """Every (experiment, planner, seed) trial, then the per-cell report with reference deltas.

    Writes ``trials.csv``, ``report.json`` and ``report.txt`` into ``out_dir``.
    """
    cfg = config or SuiteConfig()
    if "drl" in cfg.planners:
        for e in cfg.experiments:
            robot = ROBOT_OF_EXPERIMENT[e]
            if not cfg.checkpoints.get(robot):
                raise MissingArtifact(f"no checkpoint configured for robot {robot!r}")
            _policy_cache(cfg.checkpoints[robot])
    out = Path(out_dir) if out_dir else None
    dump = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        if cfg.dump_trajectories:
            dump = out / "trajectories"
            dump.mkdir(exist_ok=True)
    jobs = [(e, p, s, cfg, dump) for e in cfg.experiments for p in cfg.planners
            for s in cfg.seed_list]
    t0 = time.perf_counter()
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            records = list(pool.map(_job, jobs, chunksize=4))
    else:
        records = []
        for j in jobs:
            records.append(_job(j))
            if progress:
                progress(records[-1])
    wall = time.perf_counter() - t0
    cells = summarize(records)
    report = {"config": cfg.to_json(), "wall_clock_s": wall, "cells": cells,
              "flags": _flags(cells)}
    report["text"] = format_table(cells) + "".join(f"\nFLAG: {m}" for m in report["flags"])
    if out:
        write_trials_csv(out / "trials.csv", records)
        (out / "report.json").write_text(json.dumps(report, indent=2))
        (out / "report.txt").write_text(report["text"] + f"\n\nwall clock {wall:.1f} s\n")
    report["records"] = records
    return report


# --- exports -------------------------------------------------------------------------------

EXPORT_FIELDS = ["step", "t", "q1", "q2", "q3", "q4", "q5", "q6", "x", "y", "z",
                 "roll", "pitch", "yaw", "reward", "outcome"]


def export_trajectory(log_path, out_path):
    """Flatten a JSON-lines episode or trajectory log into one CSV row per step."""
    rows = []
    dt = None
    with open(log_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("event") == "reset":
                dt = rec.get("dt", dt)
            if rec.get("event") != "step":
                continue
            q = rec["q"]
            reward = rec.get("reward")
            if isinstance(reward, dict):
                reward = reward.get("total")
            t = rec.get("t")
            if t is None:
                t = rec["step"] * (dt or DT)
            rows.append({"step": rec["step"], "t": t,
                         **{f"q{i + 1}": v for i, v in enumerate(q)},
                         "x": rec["ee_position"][0], "y": rec["ee_position"][1],
                         "z": rec["ee_position"][2],
                         "roll": rec.get("ee_rpy", [None] * 3)[0],
                         "pitch": rec.get("ee_rpy", [None] * 3)[1],
                         "yaw": rec.get("ee_rpy", [None] * 3)[2],
                         "reward": reward, "outcome": rec.get("outcome", "")})
    if not rows:
        raise ValueError(f"{log_path}: no step records")
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, EXPORT_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return len(rows)
