"""Virtual laser bundles on the wrist, tool surface and tool tip; 142-d observations."""

import math
from dataclasses import dataclass

import numpy as np

from . import rotations as rot
from .kinematics import link_frames
from .scene import ray_cast_batch

BUNDLE_ORDER = ("wrist", "ee_surface", "ee_tip")
OBS_DIM = 142
ROBOT_STATE_DIM = 13

DEFAULT_SENSOR_CONFIG = {
    "max_range": 0.4,
    "bundles": [
        {"name": "wrist", "mount": "wrist", "kind": "cone_rings", "axial": False,
         "rings": [
             {"axis": [0, 0, 1], "polar_deg": 40, "count": 12, "azimuth_step_deg": 30},
             {"axis": [0, 0, -1], "polar_deg": 40, "count": 12, "azimuth_step_deg": 30}]},
        {"name": "ee_surface", "mount": "ee_surface", "kind": "cylinder", "stations": 8,
         "azimuth_step_deg": 45, "per_station": 10, "radius": 0.035, "z_min": 0.0,
         "z_max": 0.12},
        {"name": "ee_tip", "mount": "ee_tip", "kind": "cone_rings", "axial": True,
         "rings": [
             {"axis": [0, 0, 1], "polar_deg": 20, "count": 12, "azimuth_step_deg": 30},
             {"axis": [0, 0, 1], "polar_deg": 20, "count": 12, "azimuth_step_deg": 30,
              "azimuth_offset_deg": 15}]},
    ],
}


@dataclass(frozen=True)
class RayBundleSpec:
    name: str
    mount: str
    origins: np.ndarray
    directions: np.ndarray
    max_range: float = 0.4

    def __post_init__(self):
        d = np.asarray(self.directions, float)
        if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-12):
            raise ValueError(f"bundle {self.name}: ray directions must be unit length")

    @property
    def count(self):
        return len(self.directions)


def _perp_basis(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = helper - (helper @ axis) * axis
    e1 /= np.linalg.norm(e1)
    return axis, e1, np.cross(axis, e1)


def _cone_rings(spec):
    dirs = []
    for ring in spec["rings"]:
        axis, e1, e2 = _perp_basis(np.asarray(ring["axis"], float))
        polar = math.radians(ring["polar_deg"])
        offset = math.radians(ring.get("azimuth_offset_deg", 0.0))
        step = math.radians(ring["azimuth_step_deg"])
        for k in range(ring["count"]):
            az = offset + k * step
            d = math.cos(polar) * axis + math.sin(polar) * (math.cos(az) * e1 + math.sin(az) * e2)
            dirs.append(d / np.linalg.norm(d))
    if spec.get("axial"):
        axis = np.asarray(spec["rings"][0]["axis"], float)
        dirs.append(axis / np.linalg.norm(axis))
    dirs = np.array(dirs)
    return np.zeros_like(dirs), dirs


def _cylinder(spec):
    r, z0, z1 = spec["radius"], spec["z_min"], spec["z_max"]
    per = spec["per_station"]
    origins, dirs = [], []
    for k in range(spec["stations"]):
        az = math.radians(spec.get("azimuth_offset_deg", 0.0) + k * spec["azimuth_step_deg"])
        radial = np.array([math.cos(az), math.sin(az), 0.0])
        for j in range(per):
            z = z0 + (j + 0.5) * (z1 - z0) / per
            origins.append(r * radial + [0.0, 0.0, z])
            dirs.append(radial)
    return np.array(origins), np.array(dirs)


def bundles_from_config(cfg):
    max_range = float(cfg.get("max_range", 0.4))
    out = []
    for spec in cfg["bundles"]:
        if spec["kind"] == "cone_rings":
            o, d = _cone_rings(spec)
        elif spec["kind"] == "cylinder":
            o, d = _cylinder(spec)
        elif spec["kind"] == "explicit":
            o, d = np.asarray(spec["origins"], float), np.asarray(spec["directions"], float)
        else:
            raise ValueError(f"unknown bundle kind {spec['kind']!r}")
        out.append(RayBundleSpec(spec["name"], spec["mount"], o, d,
                                 float(spec.get("max_range", max_range))))
    by_name = {b.name: b for b in out}
    return tuple(by_name[n] for n in BUNDLE_ORDER if n in by_name) + tuple(
        b for b in out if b.name not in BUNDLE_ORDER)


def build_default_bundles(config=None):
    """Wrist (24), tool surface (80) and tool tip (25) bundles."""
    return bundles_from_config(config or DEFAULT_SENSOR_CONFIG)


def bundles_for(model):
    return build_default_bundles(model.sensor_config or None)


def mount_poses(model, frames):
    """World 4x4 transform of each sensor mount, from ``link_frames`` output."""
    return {name: frames[m.link] @ m.offset for name, m in model.sensor_frames.items()}


def _as_matrix(pose):
    return pose if isinstance(pose, np.ndarray) else pose.matrix()


def world_rays(mounts, bundles):
    origins, dirs = [], []
    for b in bundles:
        T = _as_matrix(mounts[b.mount])
        R, p = T[:3, :3], T[:3, 3]
        origins.append(b.origins @ R.T + p)
        dirs.append(b.directions @ R.T)
    return np.concatenate(origins), np.concatenate(dirs)


def sense(scene, mounts, bundles):
    """Hit fractions ordered wrist, tool surface, tool tip."""
    if scene.n_boxes == 0:
        return np.ones(sum(b.count for b in bundles))
    origins, dirs = world_rays(mounts, bundles)
    ranges = {b.max_range for b in bundles}
    if len(ranges) == 1:
        return ray_cast_batch(scene, origins, dirs, ranges.pop())[0]
    out, start = [], 0
    for b in bundles:
        sl = slice(start, start + b.count)
        out.append(ray_cast_batch(scene, origins[sl], dirs[sl], b.max_range)[0])
        start += b.count
    return np.concatenate(out)


@dataclass(frozen=True)
class Observation:
    joints: np.ndarray
    goal_delta: np.ndarray
    ee_euler: np.ndarray
    goal_distance: float
    rays: np.ndarray

    @property
    def vector(self):
        return np.concatenate([self.joints, self.goal_delta, self.ee_euler,
                               [self.goal_distance], self.rays])

    @classmethod
    def from_vector(cls, v, n_joints=6):
        v = np.asarray(v, float)
        j = n_joints
        return cls(v[:j], v[j:j + 3], v[j + 3:j + 6], float(v[j + 6]), v[j + 7:])


def observation_from_frames(model, q, frames, goal, scene, bundles):
    ee = frames[-1]
    delta = np.asarray(goal, float) - ee[:3, 3]
    rays = sense(scene, mount_poses(model, frames), bundles)
    return Observation(np.array(q, float), delta, rot.matrix_to_rpy(ee[:3, :3]),
                       float(math.sqrt(delta @ delta)), rays)


def assemble_observation(model, q, goal, scene, bundles=None):
    bundles = bundles_for(model) if bundles is None else bundles
    return observation_from_frames(model, q, link_frames(model, q), goal, scene, bundles)
