import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from pedrecon.body_model import PoseParams, ShapeParams
from pedrecon.motion import gait_pose
from pedrecon.raycaster import BoundingBox, RaySet, SensorModel, raycast_brute, raycast_mesh
from pedrecon.simulate import (
    OBSTACLE,
    Actor,
    Obstacle,
    Scene,
    SceneError,
    SynthConfig,
    box_mesh,
    rigid_transform_scene,
    simulate,
    simulate_sweep,
    synth_ground_truth,
)


def sensor(res=0.3):
    return SensorModel(np.array([0.0, 0.0, 1.8]), np.deg2rad(res), np.deg2rad(res))


def standing(template, name, x, y, phase=0.0, yaw=np.pi):
    rot = gait_pose(phase)
    rot[0] = [0, 0, yaw]
    return Actor.static(name, template, ShapeParams.neutral(template), PoseParams(rot, [x, y, 0.0]))


def test_single_actor_equals_direct_cast(coarse_template):
    a = standing(coarse_template, "p", 7.0, 0.5)
    sw = simulate_sweep(Scene([a], [], sensor()), 0.0)
    v, f = a.mesh_at(0.0)
    from pedrecon.simulate import _window

    direct = raycast_mesh(_window(BoundingBox.around(v, 0.05), sensor()), (v, f))
    assert np.array_equal(np.sort(sw.merged.points, axis=0), np.sort(direct.points, axis=0))
    assert np.all(sw.labels == 0) and len(sw.actor_points[0]) == len(direct)


def test_actor_behind_wall_gets_no_points(coarse_template):
    a = standing(coarse_template, "p", 8.0, 0.0)
    wall = Obstacle("wall", *box_mesh([5.0, -3, -0.5], [5.2, 3, 4.0]))
    sw = simulate_sweep(Scene([a], [wall], sensor()), 0.0)
    assert len(sw.actor_points[0]) == 0
    assert len(sw.obstacle_points) > 0 and np.all(sw.labels == OBSTACLE)


def oracle_sweep(meshes, rays):
    """Global closest hit per ray from independent per-mesh brute-force casts."""
    best = {}
    for owner, (v, f) in enumerate(meshes):
        s = raycast_brute(rays, (v, f))
        for k in range(len(s)):
            key = tuple(s.lattice[k].tolist())
            if key not in best or s.distance[k] < best[key][0]:
                best[key] = (s.distance[k], owner, s.points[k])
    return best


def test_two_actor_occlusion_matches_global_oracle(coarse_template):
    front = standing(coarse_template, "front", 5.0, 0.0)
    rear = standing(coarse_template, "rear", 10.0, 0.15, phase=1.0)
    scene = Scene([front, rear], [], sensor(0.4))
    sw = simulate_sweep(scene, 0.0)
    meshes = [front.mesh_at(0.0), rear.mesh_at(0.0)]
    rays = RaySet(np.unique(sw.merged.lattice, axis=0), scene.sensor)
    # rays that missed everything are not needed for the comparison
    want = oracle_sweep(meshes, rays)
    assert len(want) == len(sw.merged)
    for k in range(len(sw.merged)):
        d, owner, p = want[tuple(sw.merged.lattice[k].tolist())]
        assert sw.labels[k] == owner
        np.testing.assert_allclose(sw.merged.points[k], p, atol=1e-12)
    # rear points lie only outside the front actor's silhouette
    front_alone = simulate_sweep(Scene([front], [], scene.sensor), 0.0)
    front_cells = {tuple(c) for c in front_alone.merged.lattice.tolist()}
    rear_cells = {tuple(c) for c, l in zip(sw.merged.lattice.tolist(), sw.labels) if l == 1}
    assert rear_cells and not (rear_cells & front_cells)
    rear_alone = simulate_sweep(Scene([rear], [], scene.sensor), 0.0)
    assert len(rear_cells) < len(rear_alone.merged)


def test_rigid_motion_equivariance(coarse_template):
    a = standing(coarse_template, "p", 7.0, -0.4, phase=2.0)
    post = Obstacle("post", *box_mesh([4.0, -0.6, 0.0], [4.2, -0.4, 1.2]))
    scene = Scene([a], [post], sensor(0.4), (0.0,))
    r = Rotation.from_rotvec([0.1, -0.2, 1.3]).as_matrix()
    t = np.array([3.0, -2.0, 0.5])
    moved = rigid_transform_scene(scene, r, t)
    s0, s1 = simulate(scene)[0], simulate(moved)[0]
    assert np.array_equal(s0.merged.lattice, s1.merged.lattice)
    assert np.array_equal(s0.labels, s1.labels)
    np.testing.assert_allclose(s1.merged.points, s0.merged.points @ r.T + t, atol=1e-9)


def _silhouette_cells(v, f, s, sub=4):
    """Angular area of the projected mesh, counted on a grid ``sub`` times finer than the lattice."""
    p = v - s.origin
    phi = np.arctan2(p[:, 1], p[:, 0])
    theta = np.arcsin(p[:, 2] / np.linalg.norm(p, axis=1))
    dp, dt = s.d_phi / sub, s.d_theta / sub
    gp = np.arange(phi.min(), phi.max(), dp) + dp / 2
    gt = np.arange(theta.min(), theta.max(), dt) + dt / 2
    P, T = np.meshgrid(gp, gt, indexing="ij")
    covered = np.zeros(P.shape, bool)
    for a, b, c in f:
        x = np.array([phi[a], phi[b], phi[c]])
        y = np.array([theta[a], theta[b], theta[c]])
        i0, i1 = np.searchsorted(gp, [x.min(), x.max()])
        j0, j1 = np.searchsorted(gt, [y.min(), y.max()])
        if i1 <= i0 or j1 <= j0:
            continue
        px, py = P[i0:i1, j0:j1], T[i0:i1, j0:j1]
        det = (y[1] - y[2]) * (x[0] - x[2]) + (x[2] - x[1]) * (y[0] - y[2])
        if abs(det) < 1e-18:
            continue
        l1 = ((y[1] - y[2]) * (px - x[2]) + (x[2] - x[1]) * (py - y[2])) / det
        l2 = ((y[2] - y[0]) * (px - x[2]) + (x[0] - x[2]) * (py - y[2])) / det
        covered[i0:i1, j0:j1] |= (l1 >= 0) & (l2 >= 0) & (l1 + l2 <= 1)
    return covered.sum() / sub**2


def test_point_count_matches_solid_angle(template):
    cfg = SynthConfig(n_frames=3, distance=(10.0, 10.0), resolution_deg=0.2)
    obs, truth = synth_ground_truth(template, 11, cfg)
    s = obs[0].scan.sensor
    for o, v in zip(obs, truth.vertices):
        n = len(o.scan.target_points)
        assert 100 <= n < 1000
        assert n == pytest.approx(_silhouette_cells(v, template.faces, s), rel=0.2)


def test_synth_is_deterministic(coarse_template):
    cfg = SynthConfig(n_frames=2, resolution_deg=0.5, pixel_noise=2.0)
    a, ta = synth_ground_truth(coarse_template, 5, cfg)
    b, tb = synth_ground_truth(coarse_template, 5, cfg)
    for x, y in zip(a, b):
        assert np.array_equal(x.scan.target_points, y.scan.target_points)
        assert np.array_equal(x.joints2d.pixels, y.joints2d.pixels)
    assert np.array_equal(ta.params.flatten(), tb.params.flatten())
    c, _ = synth_ground_truth(coarse_template, 6, cfg)
    assert not np.array_equal(a[0].scan.target_points, c[0].scan.target_points)


def test_synth_scales_in_range(coarse_template):
    cfg = SynthConfig(n_frames=2, resolution_deg=0.6, scale_sigma=0.5)
    for seed in range(5):
        _, truth = synth_ground_truth(coarse_template, seed, cfg)
        assert np.all((truth.params.scales >= 0.8) & (truth.params.scales <= 1.25))


def test_occluder_removes_points(coarse_template):
    base = SynthConfig(n_frames=2, resolution_deg=0.4)
    occ = SynthConfig(n_frames=2, resolution_deg=0.4, occluder=True)
    a, _ = synth_ground_truth(coarse_template, 2, base)
    b, _ = synth_ground_truth(coarse_template, 2, occ)
    assert sum(len(o.scan.target_points) for o in b) < sum(len(o.scan.target_points) for o in a)
    assert all(len(o.scan.obstacle_points) > 0 for o in b)


def test_actor_time_range_checked(coarse_template):
    a = Actor("p", coarse_template, ShapeParams.neutral(coarse_template), [0.0, 1.0], np.zeros((2, 17, 3)), np.zeros((2, 3)))
    with pytest.raises(SceneError, match="outside"):
        a.pose_at(2.0)
    mid = a.pose_at(0.5)
    np.testing.assert_allclose(mid.joint_rotations, 0.0)
    with pytest.raises(SceneError):
        Scene([], [], sensor(), (1.0, 0.5))
