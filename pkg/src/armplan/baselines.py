"""Joint-space RRT and bidirectional RRT, goal-configuration search and timed path execution."""

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .kinematics import IKParams, NoConvergence, fk_matrix, link_frames, solve_ik
from .scene import all_free, advance, check_robot_collision, collision_free_batch, in_workspace


class PlanningFailure(RuntimeError):
    pass


class NoGoalConfig(PlanningFailure):
    pass


class RuntimeCollision(RuntimeError):
    def __init__(self, message, trajectory=None, time_s=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.time_s = time_s


@dataclass(frozen=True)
class PlannerParams:
    step_size: float = 0.1
    goal_bias: float = 0.05
    max_iterations: int = 50_000
    connect_threshold: float = 2.0
    collision_check_resolution: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.goal_bias <= 1:
            raise ValueError("goal_bias must be in [0, 1]")
        if self.step_size <= 0 or self.collision_check_resolution <= 0:
            raise ValueError("step_size and collision_check_resolution must be positive")
        if self.max_iterations < 0 or self.connect_threshold < 0:
            raise ValueError("max_iterations and connect_threshold must be >= 0")


@dataclass
class JointPath:
    configs: np.ndarray
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.configs)

    def joint_length(self):
        return float(np.sum(np.linalg.norm(np.diff(self.configs, axis=0), axis=1)))


# --- collision helpers ------------------------------------------------------

def interpolate(qa, qb, resolution):
    """Points strictly after ``qa`` up to and including ``qb``, spaced <= resolution (inf-norm)."""
    n = max(1, int(math.ceil(np.max(np.abs(qb - qa)) / resolution)))
    s = np.arange(1, n + 1)[:, None] / n
    return qa + s * (qb - qa)


def edge_free(model, scene, qa, qb, resolution, refine=10):
    """Coarse check at ``resolution``; an edge that passes is re-checked ``refine`` times denser
    so thin grazes between coarse samples are not accepted."""
    if not all_free(scene, model, interpolate(qa, qb, resolution)):
        return False
    return refine <= 1 or all_free(scene, model, interpolate(qa, qb, resolution / refine))


def path_violations(model, scene, configs, resolution):
    """Number of colliding samples along the polyline at ``resolution``."""
    configs = np.asarray(configs, float)
    pts = [configs[:1]] + [interpolate(a, b, resolution) for a, b in zip(configs, configs[1:])]
    Q = np.concatenate(pts)
    bad = 0
    for start in range(0, len(Q), 2048):
        bad += int(np.sum(~collision_free_batch(scene, model, Q[start:start + 2048])))
    return bad


# --- goal configuration -------------------------------------------------------

def goal_config(model, scene, goal_pose, q_seed=None, restarts=50, rng=None, ik=None):
    """A collision-free configuration reaching ``goal_pose`` (4x4), by DLS IK with restarts."""
    T = np.asarray(goal_pose.matrix() if hasattr(goal_pose, "matrix") else goal_pose, float)
    if not in_workspace(scene, T[:3, 3]):
        raise NoGoalConfig("goal position outside the workspace bounds")
    rng = rng if rng is not None else np.random.default_rng(0)
    ik = ik or IKParams(max_iters=500)
    seeds = [] if q_seed is None else [np.asarray(q_seed, float)]
    seeds += [model.random_config(rng) for _ in range(restarts)]
    for q0 in seeds:
        try:
            q, _ = solve_ik(model, model.clamp(q0), T, ik)
        except NoConvergence:
            continue
        if not check_robot_collision(scene, model, q).any:
            return q
    raise NoGoalConfig(f"no collision-free IK solution after {len(seeds)} attempts")


# --- trees ----------------------------------------------------------------------

class _Tree:
    def __init__(self, root, capacity):
        self.nodes = np.empty((capacity + 1, len(root)))
        self.parent = np.empty(capacity + 1, int)
        self.nodes[0] = root
        self.parent[0] = -1
        self.size = 1
        self.rounds = 0

    def nearest(self, q):
        d = self.nodes[:self.size] - q
        return int(np.argmin(np.einsum("ij,ij->i", d, d)))

    def add(self, q, parent):
        if self.size == len(self.nodes):
            grow = len(self.nodes)
            self.nodes = np.concatenate([self.nodes, np.empty((grow, self.nodes.shape[1]))])
            self.parent = np.concatenate([self.parent, np.empty(grow, int)])
        self.nodes[self.size] = q
        self.parent[self.size] = parent
        self.size += 1
        return self.size - 1

    def branch(self, i):
        out = []
        while i >= 0:
            out.append(self.nodes[i])
            i = self.parent[i]
        return out[::-1]


def _pieces(qa, qb, step):
    """Points after ``qa`` up to ``qb`` with consecutive gaps <= step."""
    n = max(1, int(math.ceil(np.linalg.norm(qb - qa) / step)))
    return [qa + (qb - qa) * (k / n) for k in range(1, n)] + [qb.copy()]


def _steer(q_from, q_to, step):
    d = q_to - q_from
    n = math.sqrt(d @ d)
    return q_to.copy() if n <= step else q_from + d * (step / n)


def _check_endpoints(model, scene, q_start, q_goal):
    for name, q in (("start", q_start), ("goal", q_goal)):
        if not model.within_limits(q):
            raise PlanningFailure(f"{name} configuration outside joint limits")
        if not collision_free_batch(scene, model, q[None])[0]:
            raise PlanningFailure(f"{name} configuration is in collision")


def _sample(model, rng):
    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
    return lo + rng.random(model.n) * (hi - lo)


def rrt_plan(model, scene, q_start, q_goal, params=PlannerParams()):
    """Single-tree RRT with goal bias, grown from ``q_start``."""
    t0 = time.perf_counter()
    q_start = np.asarray(q_start, float)
    q_goal = np.asarray(q_goal, float)
    _check_endpoints(model, scene, q_start, q_goal)
    if np.array_equal(q_start, q_goal):
        return JointPath(q_start[None].copy(), {"iterations": 0, "nodes": 1,
                                                "compute_s": time.perf_counter() - t0})
    rng = np.random.default_rng(params.seed)
    res = params.collision_check_resolution
    tree = _Tree(q_start, min(params.max_iterations, 4096))
    # direct connection first when the goal is already close
    if np.linalg.norm(q_goal - q_start) <= params.connect_threshold and \
            edge_free(model, scene, q_start, q_goal, res):
        path = [q_start] + _pieces(q_start, q_goal, params.step_size)
        return JointPath(np.array(path), {"iterations": 0, "nodes": 1,
                                          "compute_s": time.perf_counter() - t0})
    for it in range(1, params.max_iterations + 1):
        target = q_goal if rng.random() < params.goal_bias else _sample(model, rng)
        i = tree.nearest(target)
        q_new = _steer(tree.nodes[i], target, params.step_size)
        if not edge_free(model, scene, tree.nodes[i], q_new, res):
            continue
        j = tree.add(q_new, i)
        if np.linalg.norm(q_goal - q_new) <= params.connect_threshold and \
                edge_free(model, scene, q_new, q_goal, res):
            path = tree.branch(j)
            if not np.array_equal(path[-1], q_goal):
                path += _pieces(q_new, q_goal, params.step_size)
            return JointPath(np.array(path), {"iterations": it, "nodes": tree.size,
                                              "compute_s": time.perf_counter() - t0})
    raise PlanningFailure(f"RRT found no path in {params.max_iterations} iterations "
                          f"({tree.size} nodes)")


def _extend(model, scene, tree, target, params):
    i = tree.nearest(target)
    q_new = _steer(tree.nodes[i], target, params.step_size)
    if not edge_free(model, scene, tree.nodes[i], q_new, params.collision_check_resolution):
        return None
    return tree.add(q_new, i)


def _connect(model, scene, tree, target, params):
    """Greedy repeated extension toward ``target``; index of the node that reached it, or None."""
    while True:
        j = _extend(model, scene, tree, target, params)
        if j is None:
            return None
        if np.linalg.norm(tree.nodes[j] - target) <= 1e-12:
            return j


def birrt_plan(model, scene, q_start, q_goal, params=PlannerParams()):
    """Bidirectional RRT (RRT-Connect style), the stand-in for the NC-RRT comparison planner.

    The trees swap roles every iteration: one takes a random extension step
    and the other tries to connect to the new node. ``stats['rounds']``
    counts the iterations each tree led, so the two differ by at most one.
    """
    t0 = time.perf_counter()
    q_start = np.asarray(q_start, float)
    q_goal = np.asarray(q_goal, float)
    _check_endpoints(model, scene, q_start, q_goal)
    if np.array_equal(q_start, q_goal):
        return JointPath(q_start[None].copy(), {"iterations": 0, "nodes": 1, "rounds": (0, 0),
                                                "compute_s": time.perf_counter() - t0})
    rng = np.random.default_rng(params.seed)
    cap = min(params.max_iterations, 4096)
    ta, tb = _Tree(q_start, cap), _Tree(q_goal, cap)
    if np.linalg.norm(q_goal - q_start) <= params.connect_threshold and \
            edge_free(model, scene, q_start, q_goal, params.collision_check_resolution):
        path = [q_start] + _pieces(q_start, q_goal, params.step_size)
        return JointPath(np.array(path), {"iterations": 0, "nodes": 2, "rounds": (0, 0),
                                          "compute_s": time.perf_counter() - t0})
    a, b = ta, tb
    for it in range(1, params.max_iterations + 1):
        target = _sample(model, rng)
        a.rounds += 1
        j = _extend(model, scene, a, target, params)
        if j is not None:
            k = _connect(model, scene, b, a.nodes[j], params)
            if k is not None:
                pa, pb = a.branch(j), b.branch(k)
                if a is tb:
                    pa, pb = pb, pa
                path = pa + pb[::-1][1:]
                return JointPath(np.array(path), {
                    "iterations": it, "nodes": ta.size + tb.size, "tree_sizes": (ta.size, tb.size),
                    "rounds": (ta.rounds, tb.rounds), "compute_s": time.perf_counter() - t0})
        a, b = b, a
    raise PlanningFailure(f"Bi-RRT found no path in {params.max_iterations} iterations")


def shortcut_smooth(path, scene, model, iterations=100, resolution=0.01, seed=0):
    """Random shortcutting; never lengthens the path in joint space."""
    configs = [np.asarray(q, float) for q in (path.configs if isinstance(path, JointPath) else path)]
    rng = np.random.default_rng(seed)
    for _ in range(iterations):
        if len(configs) < 3:
            break
        i, j = sorted(rng.choice(len(configs), 2, replace=False))
        if j - i < 2:
            continue
        direct = np.linalg.norm(configs[j] - configs[i])
        along = sum(np.linalg.norm(configs[k + 1] - configs[k]) for k in range(i, j))
        if direct >= along:
            continue
        if edge_free(model, scene, configs[i], configs[j], resolution):
            configs = configs[:i + 1] + configs[j:]
    stats = dict(path.stats) if isinstance(path, JointPath) else {}
    return JointPath(np.array(configs), stats)


# --- execution ------------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray
    configs: np.ndarray
    ee_positions: np.ndarray
    scene_times: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for k in range(len(self.times)):
                fh.write(json.dumps({"step": k, "t": float(self.times[k]),
                                     "q": self.configs[k].tolist(),
                                     "ee_position": self.ee_positions[k].tolist()}) + "\n")


def ee_path_length(positions):
    p = np.asarray(positions, float)
    if len(p) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


def time_parametrize(configs, dt, joint_speed):
    """Sample a joint polyline at ``dt`` with every joint moving at most ``joint_speed`` rad/s.

    Each segment takes a whole number of ticks, so every waypoint is itself a
    sample and the sampled polyline never cuts a corner of the planned one.
    """
    configs = np.asarray(configs, float)
    if len(configs) == 1:
        return np.zeros(1), configs.copy()
    seg_t = np.max(np.abs(np.diff(configs, axis=0)), axis=1) / joint_speed
    ticks = np.ceil(seg_t / dt - 1e-9).astype(int)
    pts = [configs[:1]]
    for a, b, n in zip(configs, configs[1:], ticks):
        if n > 0:
            s = np.arange(1, n + 1)[:, None] / n
            pts.append(a + s * (b - a))
    Q = np.concatenate(pts)
    return np.arange(len(Q)) * dt, Q


def execute_path(model, scene, path, dt=1.0 / 60.0, joint_speed=1.0, resolution=0.01,
                 planner_compute_s=0.0, start_time=0.0):
    """Play a joint path through the (possibly moving) scene.

    Returns (Trajectory, metrics). Raises :class:`RuntimeCollision` when any
    checked sample collides with the scene at the time it is reached.
    """
    configs = path.configs if isinstance(path, JointPath) else np.asarray(path, float)
    times, Q = time_parametrize(configs, dt, joint_speed)
    frames = link_frames(model, Q)
    ee = frames[:, -1, :3, 3]
    traj = Trajectory(times + start_time, Q, ee)
    cur = advance(scene, start_time - scene.sim_time) if start_time > scene.sim_time else scene
    for k in range(len(times)):
        if k:
            cur = advance(cur, times[k] - times[k - 1])
            samples = interpolate(Q[k - 1], Q[k], resolution)
        else:
            samples = Q[:1]
        if cur.dynamic or k == 0:
            ok = collision_free_batch(cur, model, samples)
            if not np.all(ok):
                part = Trajectory(traj.times[:k + 1], Q[:k + 1], ee[:k + 1])
                raise RuntimeCollision(f"collision at t={times[k] + start_time:.3f}s", part,
                                       float(times[k] + start_time))
    if not scene.dynamic and len(configs) > 1:
        bad = path_violations(model, scene, configs, resolution)
        if bad:
            raise RuntimeCollision(f"{bad} colliding samples along a static path", traj, 0.0)
    metrics = {"planner_compute_s": float(planner_compute_s),
               "sim_exec_s": (len(times) - 1) * dt,
               "ee_path_length_m": ee_path_length(ee), "steps": len(times) - 1}
    return traj, metrics


def tip_position(model, q):
    return fk_matrix(model, q)[:3, 3]
