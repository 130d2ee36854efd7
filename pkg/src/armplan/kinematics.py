"""Denavit-Hartenberg kinematics, geometric Jacobian and damped-least-squares IK."""

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import _fastgeom, rotations as rot


class KinematicsError(ValueError):
    """Bad robot description or mismatched joint vector."""


class NoConvergence(RuntimeError):
    """DLS IK hit its iteration cap without meeting the accuracy threshold."""

    def __init__(self, message, q=None, error=None):
        super().__init__(message)
        self.q = q
        self.error = error


@dataclass(frozen=True)
class DHRow:
    theta_offset: float
    d: float
    a: float
    alpha: float

    def __post_init__(self):
        vals = (self.theta_offset, self.d, self.a, self.alpha)
        if not all(math.isfinite(v) for v in vals):
            raise KinematicsError(f"non-finite DH row {vals}")
        for name in ("theta_offset", "alpha"):
            v = getattr(self, name)
            if not (-math.pi < v <= math.pi):
                raise KinematicsError(f"{name}={v} outside (-pi, pi]")


@dataclass(frozen=True)
class Capsule:
    """Collision capsule rigidly attached to link frame ``link`` (0 = base)."""

    link: int
    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise KinematicsError(f"capsule radius must be > 0, got {self.radius}")


@dataclass(frozen=True)
class MountFrame:
    """A named frame fixed to link ``link``; ``link = n + 1`` means the tool frame."""

    link: int
    offset: np.ndarray


@dataclass(frozen=True)
class Pose:
    """Position plus unit quaternion (x, y, z, w)."""

    position: np.ndarray
    quaternion: np.ndarray

    @classmethod
    def from_matrix(cls, T):
        return cls(np.array(T[:3, 3], dtype=float), rot.matrix_to_quat(T[:3, :3]))

    @classmethod
    def from_xyz_rpy(cls, xyz, rpy=(0.0, 0.0, 0.0)):
        return cls(np.asarray(xyz, dtype=float), rot.matrix_to_quat(rot.rpy_to_matrix(rpy)))

    @property
    def rotation(self):
        return rot.quat_to_matrix(self.quaternion)

    @property
    def euler(self):
        """Fixed-axis XYZ roll, pitch, yaw."""
        return rot.matrix_to_rpy(self.rotation)

    def matrix(self):
        return rot.make_transform(self.rotation, self.position)


@dataclass(frozen=True)
class IKParams:
    lam: float = 0.05
    delta_int: float = 1.0
    delta_dif: float = 1.0
    epsilon: float = 1e-4
    max_iters: int = 100
    orientation_weight: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise KinematicsError("lambda must be > 0")
        if not self.epsilon > 0:
            raise KinematicsError("epsilon must be > 0")
        if self.max_iters < 1:
            raise KinematicsError("max_iters must be >= 1")


@dataclass(frozen=True, eq=False)
class RobotModel:
    name: str
    dh_rows: tuple
    joint_limits: np.ndarray
    ee_transform: np.ndarray
    link_capsules: tuple = ()
    sensor_frames: dict = field(default_factory=dict)
    base_transform: np.ndarray = field(default_factory=lambda: np.eye(4))
    home: np.ndarray = None
    self_collision_skip: frozenset = frozenset()
    sensor_config: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.dh_rows)
        if n < 1:
            raise KinematicsError("robot needs at least one joint")
        limits = np.asarray(self.joint_limits, dtype=float)
        if limits.shape != (n, 2) or np.any(limits[:, 0] >= limits[:, 1]):
            raise KinematicsError("joint_limits must be n x [min, max] with min < max")
        object.__setattr__(self, "joint_limits", limits)
        for name in ("ee_transform", "base_transform"):
            T = np.asarray(getattr(self, name), dtype=float)
            if T.shape != (4, 4) or not rot.is_rigid(T):
                raise KinematicsError(f"{name} must be a rigid 4x4 transform")
            object.__setattr__(self, name, T)
        for cap in self.link_capsules:
            if not 0 <= cap.link <= n + 1:
                raise KinematicsError(f"capsule link index {cap.link} out of range")
        home = np.zeros(n) if self.home is None else np.asarray(self.home, dtype=float)
        object.__setattr__(self, "home", home)
        # column arrays used by the vectorised transforms
        object.__setattr__(self, "_off", np.array([r.theta_offset for r in self.dh_rows]))
        object.__setattr__(self, "_d", np.array([r.d for r in self.dh_rows]))
        object.__setattr__(self, "_a", np.array([r.a for r in self.dh_rows]))
        alpha = np.array([r.alpha for r in self.dh_rows])
        object.__setattr__(self, "_ca", np.cos(alpha))
        object.__setattr__(self, "_sa", np.sin(alpha))

    @property
    def n(self):
        return len(self.dh_rows)

    def with_base(self, base_transform):
        """Copy of the model mounted at a different base pose."""
        return RobotModel(
            self.name, self.dh_rows, self.joint_limits, self.ee_transform,
            self.link_capsules, self.sensor_frames, np.asarray(base_transform, float),
            self.home, self.self_collision_skip, self.sensor_config)

    def clamp(self, q):
        return np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])

    def within_limits(self, q):
        q = np.asarray(q)
        return bool(np.all(q >= self.joint_limits[:, 0]) and np.all(q <= self.joint_limits[:, 1]))

    def random_config(self, rng):
        lo, hi = self.joint_limits[:, 0], self.joint_limits[:, 1]
        return lo + rng.random(self.n) * (hi - lo)


def _frame_matrix(spec):
    if spec is None:
        return np.eye(4)
    if isinstance(spec, dict):
        return rot.make_transform(rot.rpy_to_matrix(spec.get("rpy", (0, 0, 0))),
                                  spec.get("xyz", (0, 0, 0)))
    return np.asarray(spec, dtype=float).reshape(4, 4)


def robot_from_dict(cfg):
    rows = tuple(DHRow(r["theta_offset"], r["d"], r["a"], r["alpha"]) for r in cfg["dh_rows"])
    n = len(rows)
    capsules = tuple(
        Capsule(int(c["link"]), np.asarray(c["p0"], float), np.asarray(c["p1"], float),
                float(c["radius"]))
        for c in cfg.get("link_capsules", []))
    frames = {}
    for name, spec in cfg.get("sensor_frames", {}).items():
        link = spec["link"]
        link = n + 1 if link == "ee" else int(link)
        frames[name] = MountFrame(link, _frame_matrix(spec.get("offset")))
    skip = frozenset(tuple(sorted(p)) for p in cfg.get("self_collision_skip", []))
    return RobotModel(
        name=cfg.get("name", "robot"),
        dh_rows=rows,
        joint_limits=np.asarray(cfg["joint_limits"], float),
        ee_transform=np.asarray(cfg["ee_transform"], float).reshape(4, 4),
        link_capsules=capsules,
        sensor_frames=frames,
        base_transform=_frame_matrix(cfg.get("base_transform")),
        home=cfg.get("home"),
        self_collision_skip=skip,
        sensor_config=cfg.get("sensors", {}),
    )


def load_robot(name_or_path):
    """Load a robot config by bundled name (``"ur5"``, ``"kr16"``) or JSON path."""
    path = Path(str(name_or_path))
    if path.suffix == ".json" and path.exists():
        text = path.read_text()
    else:
        text = resources.files("armplan.data.robots").joinpath(
            f"{str(name_or_path).lower()}.json").read_text()
    return robot_from_dict(json.loads(text))


def dh_transform(row, q_i):
    """Single-link transform for joint angle ``q_i``.

    Layout is the transposed form of the usual row-vector D-H matrix, i.e.
    ``Rz(theta) Tz(d) Tx(a) Rx(alpha)``.
    """
    th = q_i + row.theta_offset
    ct, st = math.cos(th), math.sin(th)
    ca, sa = math.cos(row.alpha), math.sin(row.alpha)
    return np.array([
        [ct, -st * ca, st * sa, row.a * ct],
        [st, ct * ca, -ct * sa, row.a * st],
        [0.0, sa, ca, row.d],
        [0.0, 0.0, 0.0, 1.0],
    ])


def _check_q(model, q):
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != model.n:
        raise KinematicsError(f"expected {model.n} joint values, got {q.shape[-1]}")
    return q


def _link_matrices(model, Q):
    """(..., n, 4, 4) single-link transforms for a batch of configs."""
    th = Q + model._off
    ct, st = np.cos(th), np.sin(th)
    ca, sa = model._ca, model._sa
    A = np.zeros(Q.shape + (4, 4))
    A[..., 0, 0] = ct
    A[..., 0, 1] = -st * ca
    A[..., 0, 2] = st * sa
    A[..., 0, 3] = model._a * ct
    A[..., 1, 0] = st
    A[..., 1, 1] = ct * ca
    A[..., 1, 2] = -ct * sa
    A[..., 1, 3] = model._a * st
    A[..., 2, 1] = sa
    A[..., 2, 2] = ca
    A[..., 2, 3] = model._d
    A[..., 3, 3] = 1.0
    return A


def link_frames(model, q):
    """World frames of the base, every link and the tool: shape (n + 2, 4, 4).

    Index 0 is the base, index i the frame after joint i, index n + 1 the tool
    frame (link n composed with ``ee_transform``).
    """
    q = _check_q(model, q)
    A = _link_matrices(model, q)
    out = np.empty(q.shape[:-1] + (model.n + 2, 4, 4))
    T = np.broadcast_to(model.base_transform, q.shape[:-1] + (4, 4))
    out[..., 0, :, :] = T
    for i in range(model.n):
        T = T @ A[..., i, :, :]
        out[..., i + 1, :, :] = T
    out[..., model.n + 1, :, :] = T @ model.ee_transform
    return out


def fk_matrix(model, q):
    return link_frames(model, q)[..., -1, :, :]


def forward_kinematics(model, q):
    return Pose.from_matrix(fk_matrix(model, q))


def frame_of_link(model, q, link_index):
    if not 0 <= link_index <= model.n:
        raise KinematicsError(f"link index {link_index} outside [0, {model.n}]")
    return Pose.from_matrix(link_frames(model, q)[link_index])


def _jacobian_from_frames(frames, n):
    z = frames[:n, :3, 2]
    p = frames[:n, :3, 3]
    pe = frames[n + 1, :3, 3]
    J = np.empty((6, n))
    J[:3] = np.cross(z, pe - p).T
    J[3:] = z.T
    return J


def jacobian(model, q):
    """Geometric Jacobian (6 x n): linear rows then angular rows, base frame."""
    return _jacobian_from_frames(link_frames(model, q), model.n)


def pose_error(T_desired, T_current):
    """6-vector taking the current pose to the desired one (m, rad)."""
    e = np.empty(6)
    e[:3] = T_desired[:3, 3] - T_current[:3, 3]
    e[3:] = rot.matrix_to_rotvec(T_desired[:3, :3] @ T_current[:3, :3].T)
    return e


def dls_ik(model, q_current, x_d, params=IKParams()):
    """Damped-least-squares IK from ``q_current`` towards pose ``x_d``.

    ``x_d`` may be a :class:`Pose` or a 4x4 transform. Joint values are clamped
    to the limits after every update. Raises :class:`NoConvergence` when the
    weighted pose error is still above ``epsilon`` after ``max_iters`` updates.
    """
    q = _check_q(model, q_current).copy()
    T_d = x_d.matrix() if isinstance(x_d, Pose) else np.asarray(x_d, dtype=float)
    if not np.all(np.isfinite(T_d)):
        raise KinematicsError("non-finite target pose")
    return solve_ik(model, q, T_d, params)[0]


def solve_ik(model, q, T_d, params=IKParams()):
    """Unchecked DLS loop; returns (q, link frames at q). Compiled; see solve_ik_reference."""
    n = model.n
    q = np.array(q, dtype=float)
    frames = np.empty((n + 2, 4, 4))
    w = np.array([1.0, 1.0, 1.0] + [params.orientation_weight] * 3)
    lim = model.joint_limits
    ok, res = _fastgeom.dls_solve(
        q, np.ascontiguousarray(T_d, dtype=float), model._off, model._d, model._a, model._ca,
        model._sa, model.base_transform, model.ee_transform, np.ascontiguousarray(lim[:, 0]),
        np.ascontiguousarray(lim[:, 1]), w, params.lam ** 2, params.delta_int, params.delta_dif,
        params.epsilon, params.max_iters, frames)
    if ok:
        return q, frames
    raise NoConvergence(
        f"DLS IK did not reach {params.epsilon:g} in {params.max_iters} iterations "
        f"(residual {res:.3g})", q=q, error=float(res))


def solve_ik_reference(model, q, T_d, params=IKParams()):
    """Plain numpy form of :func:`solve_ik`, kept as the cross-check."""
    n = model.n
    w = np.array([1.0, 1.0, 1.0] + [params.orientation_weight] * 3)
    damp = params.lam ** 2 * np.eye(6)
    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]

    frames = link_frames(model, q)
    err = pose_error(T_d, frames[n + 1]) * w
    for _ in range(params.max_iters):
        xdot = err / params.delta_dif
        J = _jacobian_from_frames(frames, n) * w[:, None]
        qdot = J.T @ np.linalg.solve(J @ J.T + damp, xdot)
        q = np.clip(q + qdot * params.delta_int, lo, hi)
        frames = link_frames(model, q)
        err = pose_error(T_d, frames[n + 1]) * w
        if math.sqrt(err @ err) <= params.epsilon:
            return q, frames
    raise NoConvergence(
        f"DLS IK did not reach {params.epsilon:g} in {params.max_iters} iterations "
        f"(residual {math.sqrt(err @ err):.3g})", q=q, error=float(math.sqrt(err @ err)))
