import json
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from armplan import rotations as rot
from armplan.kinematics import fk_matrix, link_frames
from armplan.scene import ObstaclePrimitive, Scene
from armplan.sensors import (
    BUNDLE_ORDER, OBS_DIM, Observation, assemble_observation, build_default_bundles,
    bundles_for, mount_poses, sense, world_rays,
)

GOLDEN = Path(__file__).parent / "data" / "ray_layout_golden.json"


def plate(center, half, R=None):
    return ObstaclePrimitive("plate", rot.make_transform(R, center), np.asarray(half, float))


def test_default_counts():
    bundles = build_default_bundles()
    assert [b.name for b in bundles] == list(BUNDLE_ORDER)
    assert [b.count for b in bundles] == [24, 80, 25]
    assert sum(b.count for b in bundles) == 129


def test_robot_bundle_counts(robot):
    assert [b.count for b in bundles_for(robot)] == [24, 80, 25]


def test_directions_unit():
    for b in build_default_bundles():
        assert np.abs(np.linalg.norm(b.directions, axis=1) - 1).max() < 1e-12
        assert b.max_range == 0.4


def test_wrist_and_tip_geometry():
    wrist, surface, tip = build_default_bundles()
    polar = np.degrees(np.arccos(np.abs(wrist.directions[:, 2])))
    assert np.allclose(polar, 40)
    assert np.sum(wrist.directions[:, 2] > 0) == 12
    tip_polar = np.degrees(np.arccos(tip.directions[:, 2]))
    assert np.allclose(sorted(tip_polar)[:1], 0) and np.allclose(sorted(tip_polar)[1:], 20)
    az = np.degrees(np.arctan2(surface.directions[:, 1], surface.directions[:, 0])) % 360
    assert sorted(set(np.round(az, 6))) == [0, 45, 90, 135, 180, 225, 270, 315]


def test_empty_scene_all_ones(ur5):
    obs = assemble_observation(ur5, ur5.home, [0.3, 0, 0.3], Scene())
    assert np.array_equal(obs.rays, np.ones(129))


def test_observation_layout(ur5):
    goal = np.array([0.3, 0.2, 0.4])
    obs = assemble_observation(ur5, ur5.home, goal, Scene())
    v = obs.vector
    assert v.shape == (OBS_DIM,)
    T = fk_matrix(ur5, ur5.home)
    assert np.array_equal(v[:6], ur5.home)
    assert np.allclose(v[6:9], goal - T[:3, 3])
    assert np.allclose(rot.rpy_to_matrix(v[9:12]), T[:3, :3])
    assert abs(v[12] - np.linalg.norm(v[6:9])) < 1e-9
    back = Observation.from_vector(v)
    assert np.array_equal(back.vector, v)


def test_goal_at_ee_gives_zero_delta(ur5):
    p = fk_matrix(ur5, ur5.home)[:3, 3]
    obs = assemble_observation(ur5, ur5.home, p, Scene())
    assert np.all(obs.goal_delta == 0) and obs.goal_distance == 0


def test_observation_deterministic(ur5):
    from armplan.scene import load_scene
    s = load_scene("exp1")
    a = assemble_observation(ur5, ur5.home, s.goals[0], s).vector
    b = assemble_observation(ur5, ur5.home.copy(), s.goals[0].copy(), s).vector
    assert a.tobytes() == b.tobytes()


def _exit_fraction(origins, dirs, lo, hi, max_range):
    out = []
    for o, d in zip(origins, dirs):
        ts = []
        for i in range(3):
            if d[i] > 1e-12:
                ts.append((hi[i] - o[i]) / d[i])
            elif d[i] < -1e-12:
                ts.append((lo[i] - o[i]) / d[i])
        out.append(min(1.0, min(ts) / max_range))
    return np.array(out)


def test_enclosing_room_per_ray_oracle(ur5):
    bundles = bundles_for(ur5)
    frames = link_frames(ur5, ur5.home)
    mounts = mount_poses(ur5, frames)
    origins, dirs = world_rays(mounts, bundles)
    lo, hi = origins.min(0) - 0.1, origins.max(0) + 0.1
    c, ext = (lo + hi) / 2, (hi - lo) / 2
    t = 0.01
    walls = []
    for ax in range(3):
        for sgn in (-1, 1):
            center = c.copy()
            center[ax] += sgn * (ext[ax] + t)
            half = ext + 2 * t
            half[ax] = t
            walls.append(plate(center, half))
    scene = Scene(obstacles=tuple(walls))
    fr = sense(scene, mounts, bundles)
    ref = _exit_fraction(origins, dirs, lo, hi, 0.4)
    assert np.allclose(fr, ref, atol=1e-9)
    assert np.median(fr) < 1.0


def test_plate_in_front_of_tip_only(ur5):
    T = fk_matrix(ur5, ur5.home)
    tip, axis = T[:3, 3], T[:3, 2]
    center = tip + 0.15 * axis
    scene = Scene(obstacles=(plate(center, [0.1, 0.1, 0.005], T[:3, :3]),))
    obs = assemble_observation(ur5, ur5.home, [0.3, 0, 0.3], scene)
    assert np.all(obs.rays[104:] < 1.0)
    assert np.all(obs.rays[:24] == 1.0)


def test_pose_equivariance(ur5, rng):
    from armplan.scene import load_scene
    scene = load_scene("exp1")
    q = ur5.home + rng.normal(scale=0.2, size=6)
    base = assemble_observation(ur5, q, scene.goals[0], scene).rays
    assert np.any(base < 1.0)
    for _ in range(10):
        R = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
        T = rot.make_transform(R, rng.uniform(-2, 2, 3))
        moved_model = ur5.with_base(T @ ur5.base_transform)
        moved_scene = scene.transformed(T)
        rays = assemble_observation(moved_model, q, T[:3, :3] @ scene.goals[0] + T[:3, 3],
                                    moved_scene).rays
        assert np.allclose(rays, base, atol=1e-9)


def test_rays_bounded_and_finite(ur5, rng):
    from armplan.scene import load_scene
    scene = load_scene("exp2")
    for _ in range(30):
        v = assemble_observation(ur5, ur5.random_config(rng), scene.goals[0], scene).vector
        assert np.all(np.isfinite(v))
        assert np.all((v[13:] >= 0) & (v[13:] <= 1))


def test_layout_golden():
    """Ray layout is part of the checkpoint contract; changes must be deliberate."""
    bundles = build_default_bundles()
    data = {b.name: {"origins": np.round(b.origins, 12).tolist(),
                     "directions": np.round(b.directions, 12).tolist()} for b in bundles}
    if not GOLDEN.exists():
        GOLDEN.parent.mkdir(exist_ok=True)
        GOLDEN.write_text(json.dumps(data))
        pytest.skip("golden file written")
    golden = json.loads(GOLDEN.read_text())
    assert list(golden) == list(BUNDLE_ORDER)
    for name in BUNDLE_ORDER:
        assert np.allclose(golden[name]["origins"], data[name]["origins"], atol=1e-12)
        assert np.allclose(golden[name]["directions"], data[name]["directions"], atol=1e-12)
