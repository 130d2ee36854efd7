import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from armplan import rotations as rot
from armplan.kinematics import load_robot
from armplan.scene import (
    InvariantViolation, MotionTrack, ObstaclePrimitive, ParseError, Scene, advance,
    check_robot_collision, collision_free_batch, in_workspace, load_scene, ray_cast,
    ray_cast_batch, segment_box_distance, segment_segment_distance,
)
from oracles import march_ray, segment_box_distance_sampled, segment_segment_distance_sampled


def box(center, half, R=None, kind="box"):
    return ObstaclePrimitive(kind, rot.make_transform(R, center), np.asarray(half, float))


def random_rotation(rng):
    return Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()


# --- load_scene -------------------------------------------------------------

def test_load_empty_scene():
    s = load_scene({"workspace_bounds": [[-1, 1], [-1, 1], [0, 2]]})
    assert s.n_boxes == 0
    assert np.array_equal(s.workspace_bounds, [[-1, 1], [-1, 1], [0, 2]])
    assert s.sim_time == 0


def test_load_bundled_exp1_roundtrip():
    s = load_scene("exp1")
    plates = [o for o in s.obstacles if o.kind == "plate"]
    assert len(plates) == 1 and plates[0].name == "plate"
    assert s.robot == "ur5"
    assert len(s.goals) == 1


def test_negative_half_extent_is_invariant_violation():
    with pytest.raises(InvariantViolation):
        load_scene({"obstacles": [{"kind": "box", "half_extents": [-1, 1, 1]}]})


def test_parse_error_reports_line():
    with pytest.raises(ParseError, match="line 2"):
        load_scene('{"obstacles": [\n  {"kind": }]}')


def test_parse_error_reports_field():
    with pytest.raises(ParseError, match=r"obstacles\[0\]\.half_extents"):
        load_scene({"obstacles": [{"kind": "box", "half_extents": "big"}]})
    with pytest.raises(ParseError, match="kind"):
        load_scene({"obstacles": [{"kind": "sphere"}]})


def test_bad_bounds():
    with pytest.raises(InvariantViolation):
        load_scene({"workspace_bounds": [[1, -1], [-1, 1], [0, 1]]})


def test_compound_flattens():
    s = load_scene({"obstacles": [{
        "kind": "compound", "pose": {"xyz": [1, 0, 0], "rpy": [0, 0, math.pi / 2]},
        "children": [
            {"kind": "box", "pose": {"xyz": [0.5, 0, 0]}, "half_extents": [0.1, 0.1, 0.1]},
            {"kind": "plate", "half_extents": [0.2, 0.2, 0.01]}]}]})
    assert s.n_boxes == 2
    assert np.allclose(s.box_centers[0], [1, 0.5, 0])


def test_all_bundled_scenes_load():
    for i in range(1, 8):
        s = load_scene(f"exp{i}")
        assert s.start_config is not None and len(s.goals) >= 1
        assert s.robot == ("ur5" if i <= 3 else "kr16")
    assert load_scene("exp3").dynamic
    assert len(load_scene("exp2").goals) == 2


def test_load_from_path(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"obstacles": [{"kind": "box", "half_extents": [1, 1, 1]}]}))
    assert load_scene(p).n_boxes == 1


# --- advance ----------------------------------------------------------------

def moving_scene(loop=False):
    return load_scene({"obstacles": [{
        "kind": "plate", "half_extents": [0.1, 0.1, 0.01],
        "track": {"waypoints": [[0, 0, 0, 0], [1, 0.2, 0, 0]], "loop": loop}}]})


def test_advance_zero_is_identity():
    s = moving_scene()
    assert advance(s, 0.0) is s


def test_advance_linear_interp():
    s = advance(moving_scene(), 0.5)
    assert np.allclose(s.box_centers[0], [0.1, 0, 0])
    assert s.sim_time == 0.5
    assert np.allclose(s.tracks[0].speeds(), [0.2])


def test_advance_clamps_past_end():
    s = advance(moving_scene(), 5.0)
    assert np.allclose(s.box_centers[0], [0.2, 0, 0])


def test_advance_loop_wraps():
    s = advance(moving_scene(loop=True), 1.25)
    assert np.allclose(s.box_centers[0], [0.05, 0, 0])


def test_static_obstacles_unchanged():
    s = load_scene({"obstacles": [{"kind": "box", "pose": {"xyz": [1, 2, 3]},
                                   "half_extents": [1, 1, 1]}]})
    assert np.array_equal(advance(s, 3.0).box_centers, s.box_centers)


@given(st.floats(0, 2), st.floats(0, 2))
def test_advance_composes(a, b):
    s = moving_scene()
    one = advance(advance(s, a), b)
    two = advance(s, a + b)
    assert np.allclose(one.box_centers, two.box_centers, atol=1e-12)
    assert one.sim_time == pytest.approx(two.sim_time)


def test_track_requires_increasing_times():
    with pytest.raises(InvariantViolation):
        MotionTrack(np.array([0.0, 0.0]), np.zeros((2, 3)))


# --- ray casting ------------------------------------------------------------

def test_ray_empty_scene():
    hit = ray_cast(Scene(), [0, 0, 0], [1, 0, 0], 0.4)
    assert hit.fraction == 1.0 and not hit.hit


def test_ray_box_face_at_half_range():
    s = Scene(obstacles=(box([0.7, 0, 0], [0.5, 0.5, 0.5]),))
    hit = ray_cast(s, [0, 0, 0], [1, 0, 0], 0.4)
    assert hit.hit and hit.fraction == pytest.approx(0.5)
    assert np.allclose(hit.point, [0.2, 0, 0])


def test_ray_origin_inside():
    s = Scene(obstacles=(box([0, 0, 0], [0.5, 0.5, 0.5]),))
    hit = ray_cast(s, [0.1, 0, 0], [0, 1, 0], 0.4)
    assert hit.hit and hit.fraction == 0.0


def test_ray_out_of_range_and_behind():
    s = Scene(obstacles=(box([1.0, 0, 0], [0.1, 0.1, 0.1]),))
    assert ray_cast(s, [0, 0, 0], [1, 0, 0], 0.4).fraction == 1.0
    assert ray_cast(s, [0, 0, 0], [-1, 0, 0], 5.0).fraction == 1.0


def test_ray_rejects_non_unit():
    with pytest.raises(ValueError):
        ray_cast(Scene(), [0, 0, 0], [2, 0, 0], 0.4)


def test_ray_axis_parallel_grazing():
    s = Scene(obstacles=(box([0.2, 0.0, 0.0], [0.05, 0.05, 0.05]),))
    # parallel to the y faces, inside the slab
    assert ray_cast(s, [0, 0.01, 0], [1, 0, 0], 0.4).fraction == pytest.approx(0.375)
    # parallel and outside the slab
    assert ray_cast(s, [0, 0.2, 0], [1, 0, 0], 0.4).fraction == 1.0


def test_ray_monotone_when_obstacle_approaches():
    fr = []
    for x in np.linspace(0.6, 0.1, 20):
        s = Scene(obstacles=(box([x, 0.02, -0.01], [0.05, 0.2, 0.2]),))
        fr.append(ray_cast(s, [0, 0, 0], [1, 0, 0], 0.4).fraction)
    assert all(b <= a for a, b in zip(fr, fr[1:]))


def random_box_scene(rng, k):
    obs = []
    for _ in range(k):
        obs.append(box(rng.uniform(-0.4, 0.4, 3), rng.uniform(0.02, 0.15, 3), random_rotation(rng)))
    return Scene(obstacles=tuple(obs))


def test_ray_cast_matches_marching_oracle(rng):
    step = 0.0005
    for _ in range(150):
        s = random_box_scene(rng, int(rng.integers(1, 4)))
        o = rng.uniform(-0.3, 0.3, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        ours = ray_cast(s, o, d, 0.4).fraction
        ref = march_ray(o, d, 0.4, s.boxes(), step)
        assert abs(ours - ref) <= 2 * step / 0.4 + 1e-12


def test_fractions_in_unit_interval(rng):
    s = random_box_scene(rng, 5)
    d = rng.normal(size=(500, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    f, _ = ray_cast_batch(s, rng.uniform(-0.5, 0.5, (500, 3)), d, 0.4)
    assert np.all((f >= 0) & (f <= 1))


# --- workspace --------------------------------------------------------------

def test_in_workspace():
    s = Scene(workspace_bounds=np.array([[-1, 1], [-2, 2], [0, 1.0]]))
    assert in_workspace(s, np.array([0, 0, 0.5]))
    assert not in_workspace(s, np.array([-1 - 1e-6, 0, 0.5]))
    assert in_workspace(s, np.array([1, 2, 0.0]))


# --- distances and collision ------------------------------------------------

def test_segment_box_distance_against_sampling(rng):
    for _ in range(200):
        c = rng.uniform(-0.2, 0.2, 3)
        R = random_rotation(rng)
        h = rng.uniform(0.02, 0.2, 3)
        p0, p1 = rng.uniform(-0.5, 0.5, 3), rng.uniform(-0.5, 0.5, 3)
        ours = segment_box_distance(p0, p1, c, R, h)
        ref = segment_box_distance_sampled(p0, p1, c, R, h)
        # the sampled oracle can only overestimate, by at most half a sample spacing
        assert ours <= ref + 1e-12
        assert ref - ours <= np.linalg.norm(p1 - p0) / 4000 + 1e-12


def test_segment_segment_distance_against_sampling(rng):
    for _ in range(200):
        a0, a1, b0, b1 = (rng.uniform(-1, 1, 3) for _ in range(4))
        ours = segment_segment_distance(a0, a1, b0, b1)
        ref = segment_segment_distance_sampled(a0, a1, b0, b1)
        assert ours <= ref + 1e-12
        assert ref - ours <= 0.02
    # degenerate segments
    p = np.zeros(3)
    assert segment_segment_distance(p, p, np.array([1.0, 0, 0]), np.array([1.0, 1, 0])) == pytest.approx(1)
    assert segment_segment_distance(np.array([0, 1.0, 0]), np.array([1, 1.0, 0]), p, p) == pytest.approx(1)


def test_segment_box_symmetry(rng):
    # distance from a segment to a box equals the reversed segment's distance
    for _ in range(50):
        c, R, h = rng.uniform(-0.2, 0.2, 3), random_rotation(rng), rng.uniform(0.05, 0.2, 3)
        p0, p1 = rng.uniform(-0.5, 0.5, 3), rng.uniform(-0.5, 0.5, 3)
        assert segment_box_distance(p0, p1, c, R, h) == pytest.approx(
            segment_box_distance(p1, p0, c, R, h), abs=1e-12)


def test_empty_scene_no_world_collision(ur5, rng):
    for _ in range(20):
        assert not check_robot_collision(Scene(), ur5, ur5.random_config(rng)).world_hit


def test_capsule_inside_box_collides(ur5):
    from armplan.kinematics import link_frames
    F = link_frames(ur5, ur5.home)
    elbow = F[3, :3, 3]
    s = Scene(obstacles=(box(elbow, [0.02, 0.02, 0.02]),))
    rep = check_robot_collision(s, ur5, ur5.home)
    assert rep.world_hit and any(p[0] == "world" for p in rep.pairs)
    assert not collision_free_batch(s, ur5, ur5.home[None])[0]


def test_home_configs_free_of_self_collision():
    for name in ("ur5", "kr16"):
        m = load_robot(name)
        assert not check_robot_collision(Scene(), m, m.home).self_hit


def test_adjacent_links_never_self_collide(ur5, rng):
    from armplan.scene import capsules_for
    cs = capsules_for(ur5)
    for i, j in cs.self_pairs:
        assert abs(cs.links[i] - cs.links[j]) > 1
    for _ in range(50):
        rep = check_robot_collision(Scene(), ur5, ur5.random_config(rng))
        for kind, li, lj in rep.pairs:
            assert abs(li - lj) > 1


def test_batch_matches_single(kr16, rng):
    s = load_scene("exp4")
    Q = np.array([kr16.random_config(rng) for _ in range(40)])
    batch = collision_free_batch(s, kr16, Q)
    single = [not check_robot_collision(s, kr16, q).any for q in Q]
    assert list(batch) == single
    assert 0 < batch.sum() < 40


@pytest.mark.parametrize("name", ["exp1", "exp2", "exp4", "exp6"])
def test_compiled_kernel_matches_numpy_reference(name):
    from armplan.scene import collision_free_batch_reference
    s = load_scene(name)
    model = load_robot(s.robot)
    rng = np.random.default_rng(7)
    Q = np.array([model.random_config(rng) for _ in range(500)])
    fast = collision_free_batch(s, model, Q)
    ref = collision_free_batch_reference(s, model, Q)
    assert np.array_equal(fast, ref)
    assert 0 < fast.sum() < len(Q)


def test_compiled_rays_match_numpy_reference(rng):
    from armplan.scene import ray_cast_batch_reference
    for _ in range(50):
        s = random_box_scene(rng, int(rng.integers(1, 6)))
        o = rng.uniform(-0.5, 0.5, (129, 3))
        d = rng.normal(size=(129, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d[:3] = np.eye(3)           # axis-parallel rays take the tiny-slope branch
        fast = ray_cast_batch(s, o, d, 0.4)
        ref = ray_cast_batch_reference(s, o, d, 0.4)
        assert np.array_equal(fast[0], ref[0]) and np.array_equal(fast[1], ref[1])
