"""Geometric world model: box obstacles, motion tracks, ray casting, collisions."""

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import _fastgeom, rotations as rot
from .kinematics import link_frames


class ParseError(ValueError):
    """Scene file could not be parsed; message names the line or field."""


class InvariantViolation(ValueError):
    """Scene content parsed but breaks a geometric invariant."""


@dataclass(frozen=True)
class MotionTrack:
    """Piecewise-linear position track; ``times`` strictly increasing."""

    times: np.ndarray
    positions: np.ndarray
    loop: bool = False

    def __post_init__(self):
        t = np.asarray(self.times, float)
        p = np.asarray(self.positions, float).reshape(len(t), 3)
        if len(t) < 1 or np.any(np.diff(t) <= 0):
            raise InvariantViolation("track times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)

    def position_at(self, t):
        times = self.times
        if self.loop and times[-1] > times[0]:
            t = times[0] + (t - times[0]) % (times[-1] - times[0])
        return np.array([np.interp(t, times, self.positions[:, k]) for k in range(3)])

    def speeds(self):
        return np.linalg.norm(np.diff(self.positions, axis=0), axis=1) / np.diff(self.times)


@dataclass(frozen=True)
class ObstaclePrimitive:
    """A box, a thin plate, or a compound of child primitives.

    ``pose`` is a 4x4 transform; children are posed relative to their parent.
    """

    kind: str
    pose: np.ndarray
    half_extents: np.ndarray = None
    children: tuple = ()
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("box", "plate", "compound"):
            raise InvariantViolation(f"unknown obstacle kind {self.kind!r}")
        object.__setattr__(self, "pose", np.asarray(self.pose, float))
        if self.kind == "compound":
            if not self.children:
                raise InvariantViolation("compound obstacle needs children")
        else:
            h = np.asarray(self.half_extents, float)
            if h.shape != (3,) or not np.all(h > 0):
                raise InvariantViolation(f"half_extents must be 3 positive values, got {h}")
            object.__setattr__(self, "half_extents", h)

    def boxes(self, parent=None):
        """Flatten to a list of (center, R, half_extents) in world coordinates."""
        T = self.pose if parent is None else parent @ self.pose
        if self.kind != "compound":
            return [(T[:3, 3].copy(), T[:3, :3].copy(), self.half_extents)]
        out = []
        for child in self.children:
            out.extend(child.boxes(T))
        return out

    def moved_to(self, position):
        T = self.pose.copy()
        T[:3, 3] = position
        return replace(self, pose=T)


@dataclass(frozen=True, eq=False)
class Scene:
    obstacles: tuple = ()
    workspace_bounds: np.ndarray = field(
        default_factory=lambda: np.array([[-1.0, 1.0], [-1.0, 1.0], [0.0, 1.0]]))
    tracks: tuple = None
    sim_time: float = 0.0
    start_config: np.ndarray = None
    goals: tuple = ()
    name: str = ""
    robot: str = ""
    notes: str = ""

    def __post_init__(self):
        b = np.asarray(self.workspace_bounds, float)
        if b.shape != (3, 2) or np.any(b[:, 0] >= b[:, 1]):
            raise InvariantViolation("workspace bounds need min < max on every axis")
        object.__setattr__(self, "workspace_bounds", b)
        if self.sim_time < 0:
            raise InvariantViolation("sim_time must be >= 0")
        tracks = self.tracks if self.tracks is not None else (None,) * len(self.obstacles)
        if len(tracks) != len(self.obstacles):
            raise InvariantViolation("one track slot per obstacle")
        object.__setattr__(self, "tracks", tuple(tracks))
        boxes = [b for o in self.obstacles for b in o.boxes()]
        if boxes:
            centers = np.array([b[0] for b in boxes])
            rots = np.array([b[1] for b in boxes])
            halves = np.array([b[2] for b in boxes])
        else:
            centers, rots, halves = np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3))
        object.__setattr__(self, "box_centers", centers)
        object.__setattr__(self, "box_rotations", rots)
        object.__setattr__(self, "box_halves", halves)
        object.__setattr__(self, "box_radii", np.linalg.norm(halves, axis=1))

    @property
    def n_boxes(self):
        return len(self.box_centers)

    @property
    def dynamic(self):
        return any(t is not None for t in self.tracks)

    def boxes(self):
        return list(zip(self.box_centers, self.box_rotations, self.box_halves))

    def transformed(self, T):
        """Rigidly move every obstacle, track and the bounds' frame by T.

        Bounds stay axis aligned, so only translations keep them exact.
        """
        obstacles = tuple(replace(o, pose=T @ o.pose) for o in self.obstacles)
        tracks = tuple(
            None if tr is None else replace(tr, positions=(T[:3, :3] @ tr.positions.T).T + T[:3, 3])
            for tr in self.tracks)
        return replace(self, obstacles=obstacles, tracks=tracks,
                       workspace_bounds=self.workspace_bounds + T[:3, 3][:, None])


def _pose_from_spec(spec, where):
    if spec is None:
        return np.eye(4)
    try:
        xyz = [float(v) for v in spec.get("xyz", (0, 0, 0))]
        rpy = [float(v) for v in spec.get("rpy", (0, 0, 0))]
    except (TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"{where}: pose needs numeric xyz/rpy ({exc})") from None
    if len(xyz) != 3 or len(rpy) != 3:
        raise ParseError(f"{where}: pose xyz and rpy need 3 values each")
    return rot.make_transform(rot.rpy_to_matrix(rpy), xyz)


def _primitive_from_spec(spec, where):
    if not isinstance(spec, dict):
        raise ParseError(f"{where}: obstacle must be an object")
    kind = spec.get("kind")
    if kind not in ("box", "plate", "compound"):
        raise ParseError(f"{where}.kind: expected box|plate|compound, got {kind!r}")
    pose = _pose_from_spec(spec.get("pose"), f"{where}.pose")
    if kind == "compound":
        kids = spec.get("children")
        if not isinstance(kids, list) or not kids:
            raise ParseError(f"{where}.children: compound needs a non-empty list")
        children = tuple(_primitive_from_spec(c, f"{where}.children[{i}]")
                         for i, c in enumerate(kids))
        return ObstaclePrimitive(kind, pose, None, children, spec.get("name", ""))
    try:
        half = [float(v) for v in spec["half_extents"]]
    except (KeyError, TypeError, ValueError):
        raise ParseError(f"{where}.half_extents: expected 3 numbers") from None
    if len(half) != 3:
        raise ParseError(f"{where}.half_extents: expected 3 numbers")
    try:
        return ObstaclePrimitive(kind, pose, np.array(half), (), spec.get("name", ""))
    except InvariantViolation as exc:
        raise InvariantViolation(f"{where}: {exc}") from None


def _track_from_spec(spec, where):
    if spec is None:
        return None
    try:
        wps = np.asarray(spec["waypoints"], float)
    except (KeyError, TypeError, ValueError):
        raise ParseError(f"{where}.waypoints: expected [[t, x, y, z], ...]") from None
    if wps.ndim != 2 or wps.shape[1] != 4:
        raise ParseError(f"{where}.waypoints: expected [[t, x, y, z], ...]")
    try:
        return MotionTrack(wps[:, 0], wps[:, 1:], bool(spec.get("loop", False)))
    except InvariantViolation as exc:
        raise InvariantViolation(f"{where}: {exc}") from None


def scene_from_dict(data):
    if not isinstance(data, dict):
        raise ParseError("scene root must be a JSON object")
    obstacles, tracks = [], []
    for i, spec in enumerate(data.get("obstacles", [])):
        where = f"obstacles[{i}]"
        prim = _primitive_from_spec(spec, where)
        track = _track_from_spec(spec.get("track"), f"{where}.track")
        if track is not None:
            prim = prim.moved_to(track.position_at(0.0))
        obstacles.append(prim)
        tracks.append(track)
    bounds = data.get("workspace_bounds", [[-1, 1], [-1, 1], [0, 1]])
    try:
        bounds = np.asarray(bounds, float).reshape(3, 2)
    except (TypeError, ValueError):
        raise ParseError("workspace_bounds: expected [[xmin,xmax],[ymin,ymax],[zmin,zmax]]") from None
    start = data.get("start_config")
    goals = tuple(np.asarray(g, float) for g in data.get("goals", []))
    for i, g in enumerate(goals):
        if g.shape != (3,):
            raise ParseError(f"goals[{i}]: expected 3 numbers")
    return Scene(
        obstacles=tuple(obstacles), workspace_bounds=bounds, tracks=tuple(tracks),
        start_config=None if start is None else np.asarray(start, float), goals=goals,
        name=data.get("name", ""), robot=data.get("robot", ""), notes=data.get("notes", ""))


def load_scene(description):
    """Parse a scene from a path, a bundled name (``"exp1"``), a JSON string or a dict."""
    if isinstance(description, dict):
        return scene_from_dict(description)
    text = None
    s = str(description)
    path = Path(s)
    if s.lstrip().startswith("{"):
        text = s
    elif path.exists():
        text = path.read_text()
    else:
        name = s if s.endswith(".json") else f"{s}.json"
        try:
            text = resources.files("armplan.data.scenes").joinpath(name).read_text()
        except FileNotFoundError:
            raise ParseError(f"no scene file or bundled scene named {s!r}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return scene_from_dict(data)


def advance(scene, dt):
    """Scene snapshot ``dt`` seconds later; tracked obstacles follow their tracks."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if dt == 0:
        return scene
    t = scene.sim_time + dt
    if not scene.dynamic:
        return replace(scene, sim_time=t)
    obstacles = tuple(o if tr is None else o.moved_to(tr.position_at(t))
                      for o, tr in zip(scene.obstacles, scene.tracks))
    return replace(scene, obstacles=obstacles, sim_time=t)


def in_workspace(scene, p):
    b = scene.workspace_bounds
    return bool(np.all(p >= b[:, 0]) and np.all(p <= b[:, 1]))


# --- ray casting ------------------------------------------------------------

@dataclass(frozen=True)
class RayHit:
    fraction: float
    hit: bool
    point: np.ndarray = None


def ray_cast_batch(scene, origins, directions, max_range):
    """Hit fractions for R rays at once; returns (fractions, hit mask)."""
    origins = np.ascontiguousarray(origins, float).reshape(-1, 3)
    directions = np.ascontiguousarray(directions, float).reshape(-1, 3)
    R = len(origins)
    if scene.n_boxes == 0:
        return np.ones(R), np.zeros(R, bool)
    frac, hits = np.empty(R), np.empty(R, bool)
    _fastgeom.rays_into(origins, directions, scene.box_centers, scene.box_rotations,
                        scene.box_halves, float(max_range), frac, hits)
    return frac, hits


def ray_cast_batch_reference(scene, origins, directions, max_range):
    """Vectorised numpy slab test; the cross-check for :func:`ray_cast_batch`."""
    origins = np.asarray(origins, float).reshape(-1, 3)
    directions = np.asarray(directions, float).reshape(-1, 3)
    R = len(origins)
    if scene.n_boxes == 0:
        return np.ones(R), np.zeros(R, bool)
    rel = origins[:, None, :] - scene.box_centers[None, :, :]                  # (R,K,3)
    lo = np.einsum("rkj,kji->rki", rel, scene.box_rotations)                   # R_k^T rel
    ld = np.einsum("rj,kji->rki", directions, scene.box_rotations)
    ld = np.where(np.abs(ld) < 1e-15, np.where(ld < 0, -1e-15, 1e-15), ld)
    inv = 1.0 / ld
    h = scene.box_halves[None, :, :]
    t1 = (-h - lo) * inv
    t2 = (h - lo) * inv
    tnear = np.minimum(t1, t2).max(axis=2)
    tfar = np.maximum(t1, t2).min(axis=2)
    hit = (tnear <= tfar) & (tfar >= 0.0) & (tnear <= max_range)
    t = np.where(hit, np.maximum(tnear, 0.0), np.inf).min(axis=1)
    hits = np.isfinite(t)
    frac = np.where(hits, np.minimum(t / max_range, 1.0), 1.0)
    return frac, hits


def ray_cast(scene, origin, direction, max_range):
    origin = np.asarray(origin, float)
    direction = np.asarray(direction, float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("ray direction must be unit length")
    if not max_range > 0:
        raise ValueError("max_range must be > 0")
    frac, hit = ray_cast_batch(scene, origin[None], direction[None], max_range)
    if not hit[0]:
        return RayHit(1.0, False, None)
    return RayHit(float(frac[0]), True, origin + frac[0] * max_range * direction)


# --- distance queries -------------------------------------------------------

def segment_box_distance(p0, p1, centers, rotations, halves):
    """Exact distance from segments to oriented boxes, broadcast over leading dims.

    ``p0``, ``p1``: (..., 3); box arrays: (..., 3), (..., 3, 3), (..., 3).
    The squared distance along the segment is convex and piecewise quadratic;
    it is minimised exactly over the pieces between slab-plane crossings.
    """
    a = np.einsum("...j,...ji->...i", p0 - centers, rotations)
    u = np.einsum("...j,...ji->...i", p1 - p0, rotations)
    h = halves
    safe_u = np.where(np.abs(u) < 1e-15, 1e-15, u)
    cross = np.concatenate([(h - a) / safe_u, (-h - a) / safe_u], axis=-1)
    cross = np.clip(np.nan_to_num(cross, nan=0.0, posinf=1.0, neginf=0.0), 0.0, 1.0)
    shape = cross.shape[:-1]
    knots = np.sort(np.concatenate([np.zeros(shape + (1,)), np.ones(shape + (1,)), cross], -1), -1)
    lo_k, hi_k = knots[..., :-1], knots[..., 1:]
    mid = 0.5 * (lo_k + hi_k)                                                   # (..., 7)
    pm = a[..., None, :] + mid[..., None] * u[..., None, :]                     # (..., 7, 3)
    active = np.abs(pm) > h[..., None, :]
    s = np.sign(pm)
    uu = u[..., None, :]
    num = np.sum(np.where(active, uu * (s * h[..., None, :] - a[..., None, :]), 0.0), -1)
    den = np.sum(np.where(active, uu * uu, 0.0), -1)
    tstar = np.where(den > 0, num / np.where(den > 0, den, 1.0), mid)
    tstar = np.clip(tstar, lo_k, hi_k)
    cand = np.concatenate([knots, tstar], -1)                                   # (..., 15)
    pts = a[..., None, :] + cand[..., None] * u[..., None, :]
    out = np.maximum(np.abs(pts) - h[..., None, :], 0.0)
    return np.sqrt(np.min(np.sum(out * out, -1), -1))


def segment_segment_distance(p1, q1, p2, q2):
    """Closest distance between segments [p1,q1] and [p2,q2], broadcast."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.sum(d1 * d1, -1)
    e = np.sum(d2 * d2, -1)
    f = np.sum(d2 * r, -1)
    c = np.sum(d1 * r, -1)
    b = np.sum(d1 * d2, -1)
    eps = 1e-12
    denom = a * e - b * b
    s = np.where(denom > eps, np.clip((b * f - c * e) / np.where(denom > eps, denom, 1), 0, 1), 0.0)
    s = np.where(a <= eps, 0.0, s)
    t = np.where(e > eps, (b * s + f) / np.where(e > eps, e, 1), 0.0)
    # re-clamp t and recompute s where t left [0, 1]
    t_c = np.clip(t, 0.0, 1.0)
    s_from_t = np.where(a > eps, np.clip((t_c * b - c) / np.where(a > eps, a, 1), 0, 1), 0.0)
    s = np.where(t != t_c, s_from_t, s)
    t = t_c
    # second segment degenerate: project onto the first
    s = np.where(e <= eps, np.where(a > eps, np.clip(-c / np.where(a > eps, a, 1), 0, 1), 0.0), s)
    c1 = p1 + s[..., None] * d1
    c2 = p2 + t[..., None] * d2
    return np.linalg.norm(c1 - c2, axis=-1)


# --- robot collision --------------------------------------------------------

@dataclass(frozen=True)
class CollisionReport:
    world_hit: bool
    self_hit: bool
    pairs: tuple = ()

    @property
    def any(self):
        return self.world_hit or self.self_hit


class CapsuleSet:
    """Pre-packed capsule geometry of a robot for fast batched queries."""

    def __init__(self, model):
        caps = model.link_capsules
        self.model = model
        self.links = np.array([c.link for c in caps], np.int64)
        self.p0 = np.array([np.append(c.p0, 1.0) for c in caps])
        self.p1 = np.array([np.append(c.p1, 1.0) for c in caps])
        self.radii = np.array([c.radius for c in caps])
        pairs = []
        for i in range(len(caps)):
            for j in range(i + 1, len(caps)):
                li, lj = sorted((self.links[i], self.links[j]))
                if lj - li <= 1 or (li, lj) in model.self_collision_skip:
                    continue
                pairs.append((i, j))
        self.self_pairs = np.array(pairs, np.int64).reshape(-1, 2)
        self.p0_xyz = np.ascontiguousarray(self.p0[:, :3])
        self.p1_xyz = np.ascontiguousarray(self.p1[:, :3])

    def world_segments(self, frames):
        """(…, C, 3) endpoints from link frames (…, n+2, 4, 4)."""
        F = frames[..., self.links, :, :]
        a = np.einsum("...cij,cj->...ci", F, self.p0)[..., :3]
        b = np.einsum("...cij,cj->...ci", F, self.p1)[..., :3]
        return a, b


_capsule_cache = {}


def capsules_for(model):
    cs = _capsule_cache.get(id(model))
    if cs is None or cs.model is not model:
        cs = CapsuleSet(model)
        _capsule_cache[id(model)] = cs
    return cs


def _world_clearance(scene, cs, a, b):
    """Capsule-box clearance (…, C, K) with a sphere broadphase; far pairs get +inf."""
    if scene.n_boxes == 0:
        return np.full(a.shape[:-1] + (0,), np.inf)
    mid = 0.5 * (a + b)
    half_len = 0.5 * np.linalg.norm(b - a, axis=-1)
    gap = (np.linalg.norm(mid[..., :, None, :] - scene.box_centers, axis=-1)
           - half_len[..., :, None] - cs.radii[:, None] - scene.box_radii)
    near = gap <= 0.0
    out = np.full(gap.shape, np.inf)
    if np.any(near):
        idx = np.nonzero(near)
        k = idx[-1]
        c = idx[:-1]
        d = segment_box_distance(a[c], b[c], scene.box_centers[k], scene.box_rotations[k],
                                 scene.box_halves[k])
        out[idx] = d - cs.radii[idx[-2]]
    return out


def _self_clearance(cs, a, b):
    if len(cs.self_pairs) == 0:
        return np.full(a.shape[:-2] + (0,), np.inf)
    i, j = cs.self_pairs[:, 0], cs.self_pairs[:, 1]
    d = segment_segment_distance(a[..., i, :], b[..., i, :], a[..., j, :], b[..., j, :])
    return d - cs.radii[i] - cs.radii[j]


def _fast_args(scene, model, check_self):
    cs = capsules_for(model)
    return (model._off, model._d, model._a, model._ca, model._sa, model.base_transform,
            model.ee_transform, cs.links, cs.p0_xyz, cs.p1_xyz, cs.radii,
            cs.self_pairs, scene.box_centers, scene.box_rotations, scene.box_halves,
            scene.box_radii, bool(check_self))


def collision_report(scene, model, q):
    """Full report with the colliding (kind, link, box-or-link) pairs."""
    cs = capsules_for(model)
    a, b = cs.world_segments(link_frames(model, q))
    world = _world_clearance(scene, cs, a, b)
    selfc = _self_clearance(cs, a, b)
    pairs = []
    for ci, k in zip(*np.nonzero(world <= 0.0)):
        pairs.append(("world", int(cs.links[ci]), int(k)))
    for p in np.nonzero(selfc <= 0.0)[0]:
        i, j = cs.self_pairs[p]
        pairs.append(("self", int(cs.links[i]), int(cs.links[j])))
    return CollisionReport(bool(np.any(world <= 0.0)), bool(np.any(selfc <= 0.0)), tuple(pairs))


_FREE = CollisionReport(False, False, ())


def check_robot_collision(scene, model, q):
    q = np.asarray(q, float)
    if q.shape != (model.n,):
        raise ValueError(f"expected {model.n} joint values")
    if _fastgeom.path_free(np.ascontiguousarray(q.reshape(1, -1)), *_fast_args(scene, model, True)):
        return _FREE
    return collision_report(scene, model, q)


def collision_free_batch(scene, model, Q, check_self=True):
    """Boolean mask over a batch of configurations (M, n)."""
    Q = np.ascontiguousarray(np.asarray(Q, float).reshape(-1, model.n))
    return _fastgeom.batch_free(Q, *_fast_args(scene, model, check_self))


def all_free(scene, model, Q, check_self=True):
    """True when every configuration in Q is free; stops at the first collision."""
    Q = np.ascontiguousarray(np.asarray(Q, float).reshape(-1, model.n))
    return bool(_fastgeom.path_free(Q, *_fast_args(scene, model, check_self)))


def collision_free_batch_reference(scene, model, Q, check_self=True):
    """Vectorised numpy version of :func:`collision_free_batch`."""
    Q = np.asarray(Q, float).reshape(-1, model.n)
    cs = capsules_for(model)
    a, b = cs.world_segments(link_frames(model, Q))
    ok = np.ones(len(Q), bool)
    if scene.n_boxes:
        ok &= ~np.any(_world_clearance(scene, cs, a, b) <= 0.0, axis=(1, 2))
    if check_self:
        ok &= ~np.any(_self_clearance(cs, a, b) <= 0.0, axis=1)
    return ok


def point_clearance(scene, p):
    """Distance from a point to the nearest obstacle box (0 inside)."""
    if scene.n_boxes == 0:
        return math.inf
    local = np.einsum("kj,kji->ki", np.asarray(p) - scene.box_centers, scene.box_rotations)
    out = np.maximum(np.abs(local) - scene.box_halves, 0.0)
    return float(np.sqrt(np.sum(out * out, -1)).min())
