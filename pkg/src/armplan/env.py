"""Reaching MDP: IK-driven pose increments, shaped reward, shake counter, target-size curriculum."""

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import rotations as rot
from .kinematics import IKParams, NoConvergence, link_frames, load_robot, solve_ik
from .scene import (
    MotionTrack, ObstaclePrimitive, Scene, advance, check_robot_collision, in_workspace,
    load_scene, point_clearance,
)
from .sensors import bundles_for, observation_from_frames

ACTION_BOUND = 0.005
MAX_EPISODE_STEPS = 1024
SHAKE_WINDOW = 10
DT = 1.0 / 60.0

OUTCOMES = ("running", "success", "collision", "out_of_bounds", "timeout")

DEFAULT_WORKSPACE = {
    "ur5": [[-0.3, 0.95], [-0.8, 0.8], [0.0, 0.95]],
    "kr16": [[-0.5, 2.1], [-1.2, 1.2], [0.2, 2.0]],
}


class UnreachableTask(RuntimeError):
    pass


class StepAfterDone(RuntimeError):
    pass


# --- actions and reward -----------------------------------------------------

@dataclass(frozen=True)
class Action:
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    dyaw: float = 0.0
    dpitch: float = 0.0
    droll: float = 0.0

    def __post_init__(self):
        for name in ("dx", "dy", "dz", "dyaw", "dpitch", "droll"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"action component {name} is not finite")
            object.__setattr__(self, name, min(ACTION_BOUND, max(-ACTION_BOUND, v)))

    @classmethod
    def from_array(cls, a):
        return cls(*np.asarray(a, float).reshape(6))

    def as_array(self):
        return np.array([self.dx, self.dy, self.dz, self.dyaw, self.dpitch, self.droll])


@dataclass(frozen=True)
class RewardBreakdown:
    r_suc: float
    r_c: float
    r_d: float
    r_shake: float
    r_o: float
    r_e: float
    total: float

    def as_dict(self):
        return {k: getattr(self, k) for k in ("r_suc", "r_c", "r_d", "r_shake", "r_o", "r_e", "total")}


def compute_reward(d_t, collided, in_bounds, step, n_s, d_th, step_max=MAX_EPISODE_STEPS):
    """Six reward terms and their sum. Success counts at ``d_t <= d_th``."""
    r_suc = 10.0 if d_t <= d_th else 0.0
    r_c = -10.0 if collided else 0.0
    r_d = -0.01 * d_t
    r_o = 0.0 if in_bounds else -10.0
    r_e = -5.0 if step > step_max else 0.0
    r_shake = -0.005 * n_s
    total = r_suc + r_c + r_d + r_shake + r_o + r_e
    return RewardBreakdown(r_suc, r_c, r_d, r_shake, r_o, r_e, total)


def shake_count(dist_queue, d_t, maxlen=SHAKE_WINDOW):
    """Push ``d_t`` and count direction flips among the stored distances.

    The oldest entry is dropped before appending once the queue is full, so
    it never holds more than ``maxlen`` values.
    """
    q = deque(dist_queue)
    if len(q) >= maxlen:
        q.popleft()
    q.append(float(d_t))
    vals = list(q)
    bits = [0 if b - a >= 0 else 1 for a, b in zip(vals, vals[1:])]
    n_s = sum(1 for a, b in zip(bits, bits[1:]) if a != b)
    return tuple(vals), n_s


# --- target-size curriculum -------------------------------------------------

@dataclass(frozen=True)
class CurriculumParams:
    rho: float = 0.01
    rho_max: float = 0.1
    rho_min: float = 0.01
    delta_plus: float = 0.001
    delta_minus: float = 0.01
    e_zeta: int = 1000
    p_zeta: float = 0.9
    k: int = 50


@dataclass(frozen=True)
class CurriculumState:
    params: CurriculumParams = field(default_factory=CurriculumParams)
    rho_tilde: float = None
    episode: int = 0
    history: tuple = ()

    def __post_init__(self):
        if self.rho_tilde is None:
            object.__setattr__(self, "rho_tilde", self.params.rho)
        p = self.params
        if not p.rho_min <= self.rho_tilde <= p.rho_max:
            raise ValueError(f"rho_tilde {self.rho_tilde} outside [{p.rho_min}, {p.rho_max}]")
        if len(self.history) > p.k:
            raise ValueError("history longer than k")

    @property
    def eta(self):
        return sum(self.history) / self.params.k

    def as_dict(self):
        return {"rho_tilde": self.rho_tilde, "episode": self.episode,
                "history": list(self.history), "params": vars(self.params).copy()}

    @classmethod
    def from_dict(cls, d):
        return cls(CurriculumParams(**d["params"]), d["rho_tilde"], d["episode"],
                   tuple(d["history"]))


def update_target_size(cur, s_e):
    """Fold in the outcome of episode ``cur.episode`` and pick the next target size."""
    p = cur.params
    history = (cur.history + (int(bool(s_e)),))[-p.k:]
    eta = sum(history) / p.k
    e = cur.episode
    prev = cur.rho_tilde
    if e < p.e_zeta:
        new = p.rho
    elif eta == 1 and prev == p.rho:
        new = p.rho
    elif eta < p.p_zeta and prev < p.rho_max:
        new = prev + p.delta_plus
    elif eta >= p.p_zeta and prev > p.rho_min:
        new = prev - p.delta_minus
    else:
        new = prev
    new = min(p.rho_max, max(p.rho_min, new))
    return CurriculumState(p, new, e + 1, history)


@dataclass
class ObstacleSchedule:
    """Obstacle count for random tasks, moved by the rolling success rate."""

    count: int = 0
    min_count: int = 0
    max_count: int = 6
    window: int = 50
    up: float = 0.8
    down: float = 0.3
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.count = min(self.max_count, max(self.min_count, self.count))

    def record(self, success):
        self.history.append(int(bool(success)))
        if len(self.history) < self.window:
            return self.count
        rate = sum(self.history[-self.window:]) / self.window
        if rate >= self.up and self.count < self.max_count:
            self.count += 1
            self.history.clear()
        elif rate <= self.down and self.count > self.min_count:
            self.count -= 1
            self.history.clear()
        return self.count


# --- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class RandomTaskConfig:
    start_jitter: float = 0.15
    goal_min_dist: float = 0.05
    goal_max_dist: float = 0.45
    goal_margin: float = 0.05
    goal_min_z: float = 0.05
    workspace: tuple = None
    floor: bool = False
    plate_width: tuple = (0.08, 0.18)
    plate_height: tuple = (0.05, 0.15)
    plate_thickness: float = 0.005
    dynamic_prob: float = 0.0
    dynamic_speed: float = 0.2
    dynamic_travel: float = 0.4
    min_obstacles: int = 0
    max_obstacles: int = 0
    start_clearance: float = 0.05
    max_retries: int = 200
    reach_iters: int = 300


@dataclass(frozen=True)
class EnvConfig:
    robot: str = "ur5"
    task: str = "random"
    dt: float = DT
    max_episode_steps: int = MAX_EPISODE_STEPS
    eval_threshold: float = None
    ik: IKParams = field(default_factory=IKParams)
    random_task: RandomTaskConfig = field(default_factory=RandomTaskConfig)
    start_jitter: float = 0.0

    def as_dict(self):
        d = {k: getattr(self, k) for k in ("robot", "task", "dt", "max_episode_steps",
                                           "eval_threshold", "start_jitter")}
        d["ik"] = vars(self.ik).copy()
        d["random_task"] = vars(self.random_task).copy()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        ik = IKParams(**d.pop("ik", {}))
        rt = d.pop("random_task", {})
        rt = {k: tuple(v) if isinstance(v, list) else v for k, v in rt.items()}
        return cls(ik=ik, random_task=RandomTaskConfig(**rt), **d)


# --- episode state ----------------------------------------------------------

@dataclass(eq=False)
class EpisodeState:
    q: np.ndarray
    scene: Scene
    goal: np.ndarray
    d_th: float
    step_count: int = 0
    dist_queue: tuple = ()
    done: bool = False
    outcome: str = "running"
    goals: tuple = ()
    goal_index: int = 0
    frames: np.ndarray = field(default=None, repr=False)

    def __eq__(self, other):
        if not isinstance(other, EpisodeState):
            return NotImplemented
        s, o = self.scene, other.scene
        return (np.array_equal(self.q, other.q) and np.array_equal(self.goal, other.goal)
                and self.d_th == other.d_th and self.step_count == other.step_count
                and self.dist_queue == other.dist_queue and self.done == other.done
                and self.outcome == other.outcome and self.goal_index == other.goal_index
                and s.sim_time == o.sim_time and np.array_equal(s.box_centers, o.box_centers)
                and np.array_equal(s.box_rotations, o.box_rotations)
                and np.array_equal(s.box_halves, o.box_halves))

    @property
    def ee(self):
        return self.frames[-1]


def _yaw_plate(center, yaw, half):
    return ObstaclePrimitive("plate", rot.make_transform(rot.rot_z(yaw), center),
                             np.asarray(half, float), name="plate")


def floor_obstacle(bounds):
    b = np.asarray(bounds, float)
    c = [(b[0, 0] + b[0, 1]) / 2, (b[1, 0] + b[1, 1]) / 2, -0.06]
    half = [(b[0, 1] - b[0, 0]) / 2 + 0.2, (b[1, 1] - b[1, 0]) / 2 + 0.2, 0.05]
    return ObstaclePrimitive("box", rot.make_transform(None, c), np.array(half), name="floor")


class ReachEnv:
    """One single-owner environment instance.

    ``reset``/``step`` follow the usual RL loop; ``transition`` is the pure
    form of ``step`` and leaves its input state untouched.
    """

    def __init__(self, config=None, model=None, log_path=None):
        self.config = config or EnvConfig()
        self.model = model or load_robot(self.config.robot)
        self.bundles = bundles_for(self.model)
        self.state = None
        self._log = open(log_path, "a") if log_path else None
        self._scene_cache = {}

    def close(self):
        if self._log:
            self._log.close()
            self._log = None

    # -- tasks --

    def _workspace(self):
        ws = self.config.random_task.workspace or DEFAULT_WORKSPACE.get(self.model.name)
        if ws is None:
            raise UnreachableTask(f"no workspace bounds known for robot {self.model.name}")
        return np.asarray(ws, float)

    def _scene_task(self, task, rng):
        if task not in self._scene_cache:
            self._scene_cache[task] = load_scene(task)
        scene = self._scene_cache[task]
        q = scene.start_config if scene.start_config is not None else self.model.home
        q = np.array(q, float)
        if self.config.start_jitter > 0:
            for _ in range(self.config.random_task.max_retries):
                cand = self.model.clamp(q + rng.uniform(-1, 1, q.shape) * self.config.start_jitter)
                if not check_robot_collision(scene, self.model, cand).any:
                    q = cand
                    break
        if not scene.goals:
            raise UnreachableTask(f"scene {scene.name!r} has no goals")
        return scene, q, tuple(np.asarray(g, float) for g in scene.goals)

    def _random_task(self, rng, rho_tilde, n_obstacles):
        rt = self.config.random_task
        model = self.model
        bounds = self._workspace()
        base = [floor_obstacle(bounds)] if rt.floor else []
        lo = bounds[:, 0] + rt.goal_margin
        hi = bounds[:, 1] - rt.goal_margin
        lo[2] = max(lo[2], rt.goal_min_z)
        reach = IKParams(max_iters=rt.reach_iters)
        for _ in range(rt.max_retries):
            q0 = model.clamp(model.home + rng.uniform(-1, 1, model.n) * rt.start_jitter)
            empty = Scene(obstacles=tuple(base), workspace_bounds=bounds)
            if check_robot_collision(empty, model, q0).any:
                continue
            T0 = link_frames(model, q0)[-1]
            p0 = T0[:3, 3]
            if not in_workspace(empty, p0):
                continue
            # goal at a random direction and distance from the start tip
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            goal = p0 + v * rng.uniform(rt.goal_min_dist, rt.goal_max_dist)
            if np.any(goal < lo) or np.any(goal > hi):
                continue
            T_goal = T0.copy()
            T_goal[:3, 3] = goal
            try:
                q_goal, _ = solve_ik(model, q0, T_goal, reach)
            except NoConvergence:
                continue
            obstacles, tracks = self._random_obstacles(rng, p0, goal, n_obstacles)
            scene = Scene(obstacles=tuple(base) + obstacles, workspace_bounds=bounds,
                          tracks=(None,) * len(base) + tracks, name="random")
            if scene.n_boxes > len(base):
                if point_clearance(scene, goal) < max(rho_tilde, rt.start_clearance):
                    continue
                if point_clearance(scene, p0) < rt.start_clearance:
                    continue
            if check_robot_collision(scene, model, q0).any:
                continue
            if check_robot_collision(scene, model, q_goal).any:
                continue
            return scene, q0, (goal,)
        raise UnreachableTask(f"no valid random task after {rt.max_retries} tries")

    def _random_obstacles(self, rng, p0, goal, n):
        rt = self.config.random_task
        obstacles, tracks = [], []
        direction = goal - p0
        yaw = math.atan2(direction[1], direction[0]) + math.pi / 2
        for i in range(n):
            t = rng.uniform(0.35, 0.65)
            center = p0 + t * direction + rng.normal(scale=0.04, size=3)
            half = [rng.uniform(*rt.plate_width), rt.plate_thickness, rng.uniform(*rt.plate_height)]
            plate_yaw = yaw + rng.normal(scale=0.2) if i == 0 else rng.uniform(-math.pi, math.pi)
            obstacles.append(_yaw_plate(center, plate_yaw, half))
            if rt.dynamic_prob > 0 and rng.random() < rt.dynamic_prob:
                v = rng.normal(size=3)
                v[2] *= 0.3
                v /= np.linalg.norm(v)
                end = center + v * rt.dynamic_travel
                period = rt.dynamic_travel / rt.dynamic_speed
                tracks.append(MotionTrack(np.array([0.0, period, 2 * period]),
                                          np.array([center, end, center]), loop=True))
            else:
                tracks.append(None)
        return tuple(obstacles), tuple(tracks)

    # -- lifecycle --

    def reset(self, seed=None, curriculum=None, task=None, n_obstacles=None):
        rng = np.random.default_rng(seed)
        curriculum = curriculum or CurriculumState()
        task = task or self.config.task
        if "|" in task:
            # mixture: one entry drawn uniformly per episode
            task = str(rng.choice(task.split("|")))
        if task == "random":
            n = self.config.random_task.min_obstacles if n_obstacles is None else n_obstacles
            scene, q, goals = self._random_task(rng, curriculum.rho_tilde, n)
        else:
            scene, q, goals = self._scene_task(task, rng)
        d_th = self.config.eval_threshold if self.config.eval_threshold is not None \
            else curriculum.rho_tilde
        frames = link_frames(self.model, q)
        self.state = EpisodeState(q=q, scene=scene, goal=goals[0], d_th=d_th, goals=goals,
                                  frames=frames)
        self._write({"event": "reset", "seed": seed, "task": task, "q": q.tolist(),
                     "goals": [g.tolist() for g in goals], "d_th": d_th})
        return self.state, self.observe(self.state)

    def observe(self, state):
        return observation_from_frames(self.model, state.q, state.frames, state.goal,
                                       state.scene, self.bundles)

    def transition(self, state, action):
        if state.done:
            raise StepAfterDone("episode already finished; call reset()")
        if not isinstance(action, Action):
            action = Action.from_array(action)
        cfg = self.config
        model = self.model
        a = action.as_array()
        T = state.ee.copy()
        T[:3, 3] += a[:3]
        T[:3, :3] = rot.rpy_to_matrix((a[5], a[4], a[3])) @ T[:3, :3]
        info = {"ik_failed": False}
        try:
            q, frames = solve_ik(model, state.q, T, cfg.ik)
        except NoConvergence:
            q, frames = state.q, state.frames
            info["ik_failed"] = True
        scene = advance(state.scene, cfg.dt)
        step = state.step_count + 1
        collision = check_robot_collision(scene, model, q)
        ee = frames[-1][:3, 3]
        inside = in_workspace(scene, ee)
        diff = state.goal - ee
        d = math.sqrt(diff @ diff)
        queue, n_s = shake_count(state.dist_queue, d)
        reward = compute_reward(d, collision.any, inside, step, n_s, state.d_th,
                                step_max=cfg.max_episode_steps - 1)
        goal, goal_index = state.goal, state.goal_index
        if collision.any:
            outcome = "collision"
        elif not inside:
            outcome = "out_of_bounds"
        elif d <= state.d_th:
            outcome = "success"
            if goal_index + 1 < len(state.goals):
                goal_index += 1
                goal = state.goals[goal_index]
                queue = ()
                info["waypoint_reached"] = goal_index
                outcome = "running"
                if step >= cfg.max_episode_steps:
                    outcome = "timeout"
        elif step >= cfg.max_episode_steps:
            outcome = "timeout"
        else:
            outcome = "running"
        new = replace(state, q=q, scene=scene, goal=goal, goal_index=goal_index, step_count=step,
                      dist_queue=queue, done=outcome != "running", outcome=outcome, frames=frames)
        info.update(distance=d, n_s=n_s, collision_pairs=collision.pairs)
        return new, self.observe(new), reward, new.done, info

    def step(self, action):
        if self.state is None:
            raise StepAfterDone("reset() must be called first")
        new, obs, reward, done, info = self.transition(self.state, action)
        self.state = new
        if self._log:
            ee = new.ee
            self._write({"event": "step", "step": new.step_count, "q": new.q.tolist(),
                         "ee_position": ee[:3, 3].tolist(),
                         "ee_rpy": rot.matrix_to_rpy(ee[:3, :3]).tolist(),
                         "action": (action.as_array() if isinstance(action, Action)
                                    else Action.from_array(action).as_array()).tolist(),
                         "reward": reward.as_dict(), "outcome": new.outcome,
                         "ik_failed": info["ik_failed"]})
        return new, obs, reward, done, info

    def _write(self, record):
        if self._log:
            self._log.write(json.dumps(record) + "\n")
