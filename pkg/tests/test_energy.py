import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pedrecon.body_model import PoseParams, ShapeParams
from pedrecon.energy import (
    TERMS,
    Camera,
    ChamferError,
    EnergyWeights,
    Joints2D,
    LaplacianOperator,
    ProjectionError,
    SequenceEnergy,
    bone_prior,
    chamfer,
    e_joint,
    e_pose,
    e_shape,
    geman_mcclure,
    project,
    total_energy,
)
from pedrecon.gmm import GmmPrior
from pedrecon.optim import ParamBlock
from pedrecon.simulate import SynthConfig, synth_ground_truth
from pedrecon.template import SYMMETRY_CLASSES

from conftest import chain_template


def brute_chamfer(x, y):
    d = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    return d.min(1).mean() + d.min(0).mean()


def test_chamfer_examples():
    x = np.random.default_rng(0).normal(size=(20, 3))
    assert chamfer(x, x) == 0.0
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    with pytest.raises(ChamferError):
        chamfer(np.zeros((0, 3)), x)


def test_chamfer_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        x, y = rng.normal(size=(200, 3)), rng.normal(size=(300, 3)) + 0.3
        assert chamfer(x, y) == pytest.approx(brute_chamfer(x, y), abs=1e-12)


@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 1000))
def test_chamfer_symmetric_and_nonnegative(n, m, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert chamfer(x, y) >= 0
    assert chamfer(x, y) == pytest.approx(chamfer(y, x), rel=1e-12)


def test_geman_mcclure_examples():
    assert geman_mcclure(0.0) == 0.0
    assert geman_mcclure(100.0, 100.0) == 5000.0
    xs = np.linspace(0, 1e5, 1000)
    vals = geman_mcclure(xs, 100.0)
    assert np.all(np.diff(vals) > 0) and vals[-1] < 1e4 and vals[-1] > 9999.0


def test_projection_examples():
    cam = Camera(np.hstack([np.eye(3), np.zeros((3, 1))]))
    np.testing.assert_allclose(project(cam, [0, 0, 1]), [0, 0])
    cam2 = Camera(np.diag([2.0, 2.0, 1.0, 0.0])[:3])
    np.testing.assert_allclose(project(cam2, [1, 2, 2]), [1, 2])
    with pytest.raises(ProjectionError):
        project(cam, [0, 0, -1])


def test_projection_matches_homogeneous_oracle():
    rng = np.random.default_rng(2)
    from scipy.spatial.transform import Rotation

    for _ in range(20):
        rot = Rotation.random(random_state=rng).as_matrix()
        trans = rng.normal(size=3)
        f, c = rng.uniform(500, 1500), rng.uniform(300, 900, 2)
        cam = Camera.pinhole(f, c, rot, trans)
        p_cam = np.r_[rng.normal(size=2), rng.uniform(2, 10)]
        p = rot.T @ (p_cam - trans)
        k = np.array([[f, 0, c[0]], [0, f, c[1]], [0, 0, 1]])
        h = k @ np.hstack([rot, trans[:, None]]) @ np.r_[p, 1]
        np.testing.assert_allclose(project(cam, p), h[:2] / h[2], rtol=1e-12)


def test_forward_facing_camera_geometry():
    cam = Camera.forward_facing([0, 0, 1.8])
    np.testing.assert_allclose(project(cam, [5, 0, 1.8]), [960, 600], atol=1e-9)
    left, up = project(cam, [5, 1, 1.8]), project(cam, [5, 0, 2.8])
    assert left[0] < 960 and up[1] < 600


def _joint_fixture():
    cam = Camera.forward_facing([0, 0, 0])
    joints = np.array([[5.0, 0.1, 0.2], [6.0, -0.3, 0.4]])
    pix = np.array([project(cam, j) for j in joints])
    return cam, joints, pix


def test_e_joint_examples():
    cam, joints, pix = _joint_fixture()
    names = ("a", "b")
    assert e_joint(joints, Joints2D(names, pix, [1, 1]), cam, 100.0, [0, 1]) == pytest.approx(0.0, abs=1e-18)
    shifted = pix + [[100.0, 0.0], [0.0, 0.0]]
    assert e_joint(joints, Joints2D(names, shifted, [1, 0]), cam, 100.0, [0, 1]) == pytest.approx(5000.0)
    far = pix + 1e3
    assert e_joint(joints, Joints2D(names, far, [0, 0]), cam, 100.0, [0, 1]) == 0.0


def test_gmm_at_mean_is_gaussian_constant():
    d = 48
    g = GmmPrior.from_covariances([1.0], np.zeros((1, d)), np.eye(d)[None])
    assert g.nll(np.zeros(d)) == pytest.approx(d / 2 * np.log(2 * np.pi), rel=1e-12)


def test_bone_prior_examples(template):
    assert bone_prior(template, np.ones(template.n_classes)) == 0.0
    t = chain_template(n_joints=2)
    assert bone_prior(t, [2.0, 0.5]) == pytest.approx(1.0)


def test_e_pose_combines_terms(template, prior):
    rot = np.random.default_rng(0).normal(scale=0.1, size=(17, 3))
    s = np.full(template.n_classes, 1.1)
    val = e_pose(PoseParams(rot, np.zeros(3)), ShapeParams(s, np.zeros(len(template.vertices))), prior, 4.0, template)
    assert val == pytest.approx(prior.nll(rot[1:].ravel()) + 4.0 * bone_prior(template, s), rel=1e-12)


def _sheet(n=6):
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    v = np.c_[xs.ravel(), ys.ravel(), np.zeros(n * n)]
    f = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            f += [[a, a + 1, a + n + 1], [a, a + n + 1, a + n]]
    return v, np.array(f)


def test_shape_prior_examples():
    v, f = _sheet()
    t = chain_template(n_joints=1, n_verts=len(v))
    t = type(t)(v, np.tile([0, 0, 1.0], (len(v), 1)), f, np.ones((len(v), 1)), t.joints, t.parents, ((0,),))
    lap = LaplacianOperator.from_template(t)
    assert e_shape(ShapeParams([1.0], np.zeros(len(v))), t, lap, 7.0) == 0.0
    d = 0.02
    val = e_shape(ShapeParams([1.0], np.full(len(v), d)), t, lap, 7.0)
    assert val == pytest.approx(7.0 * len(v) * d * d, rel=1e-12)


@pytest.mark.parametrize("kind", ["uniform", "cotangent"])
def test_laplacian_matches_dense_oracle(coarse_template, kind):
    t = coarse_template
    lap = LaplacianOperator.from_template(t, kind)
    n = len(t.vertices)
    # dense oracle built independently from the face list
    w = np.zeros((n, n))
    if kind == "uniform":
        for a, b, c in t.faces:
            for i, j in ((a, b), (b, c), (c, a)):
                w[i, j] = w[j, i] = 1.0
    else:
        for face in t.faces:
            for k in range(3):
                i, j, o = face[k], face[(k + 1) % 3], face[(k + 2) % 3]
                u, z = t.vertices[i] - t.vertices[o], t.vertices[j] - t.vertices[o]
                cot = max(u @ z / np.linalg.norm(np.cross(u, z)), 1e-6) / 2
                w[i, j] += cot
                w[j, i] += cot
    dense = w / w.sum(1, keepdims=True) - np.eye(n)
    np.testing.assert_allclose(lap.dense(), dense, atol=1e-12)
    x = np.random.default_rng(0).normal(size=(n, 3))
    np.testing.assert_allclose(lap.apply(x), dense @ x, atol=1e-12)
    np.testing.assert_allclose(lap.apply_torch(torch.tensor(x)).numpy(), dense @ x, atol=1e-12)
    np.testing.assert_allclose(lap.apply(np.ones(n)), 0.0, atol=1e-12)


def test_default_weights():
    w = EnergyWeights()
    assert (w.sim, w.joint, w.pose, w.bone, w.l2, w.lap, w.sigma) == (
        144.0**2,
        0.2**2,
        0.478**2,
        2.0**2,
        100.0**2,
        1000.0**2,
        100.0,
    )
    with pytest.raises(ValueError):
        EnergyWeights(sim=-1.0)


@pytest.fixture(scope="module")
def synth_pair(coarse_template):
    obs, truth = synth_ground_truth(coarse_template, 3, SynthConfig(n_frames=2, resolution_deg=0.4))
    return obs, truth


def test_truth_has_zero_data_terms(coarse_template, prior, synth_pair):
    obs, truth = synth_pair
    b = total_energy(truth.params, obs, coarse_template, prior)
    assert np.all(b.per_frame["sim"] < 1e-6)
    assert np.all(b.per_frame["joint"] == 0.0)
    assert set(b.terms) == set(TERMS)
    assert b.total == pytest.approx(sum(b.terms.values()), abs=1e-9)


def test_zero_weights_annihilate(coarse_template, prior, synth_pair):
    obs, truth = synth_pair
    zero = EnergyWeights(0, 0, 0, 0, 0, 0)
    assert total_energy(truth.params, obs, coarse_template, prior, zero).total == 0.0


def test_two_identical_frames_double_energy(coarse_template, prior, synth_pair):
    obs, truth = synth_pair
    p = truth.params
    rng = np.random.default_rng(4)
    one = ParamBlock(p.rotations[:1] + 0.05, p.offsets[:1] + 0.01, p.scales * 1.05, rng.normal(0, 0.003, p.displacements.shape))
    two = ParamBlock(np.repeat(one.rotations, 2, 0), np.repeat(one.offsets, 2, 0), one.scales, one.displacements)
    e1 = total_energy(one, obs[:1], coarse_template, prior).total
    e2 = total_energy(two, [obs[0], obs[0]], coarse_template, prior).total
    assert e2 == pytest.approx(2 * e1, rel=1e-12)


def test_torch_terms_match_numpy_terms(coarse_template, prior, synth_pair):
    obs, truth = synth_pair
    t = coarse_template
    rng = np.random.default_rng(5)
    p = truth.params
    q = ParamBlock(p.rotations + rng.normal(0, 0.05, p.rotations.shape), p.offsets, p.scales * 1.03, rng.normal(0, 0.004, p.displacements.shape))
    problem = SequenceEnergy(t, obs, prior)
    b = problem.evaluate(q)
    shape = ShapeParams(q.scales, q.displacements)
    _, joints = problem.posed(q)
    for k, o in enumerate(obs):
        idx = o.joints2d.indices(t)
        assert b.per_frame["joint"][k] == pytest.approx(e_joint(joints[k], o.joints2d, o.camera, 100.0, idx), rel=1e-10)
        pose = PoseParams(q.rotations[k], q.offsets[k])
        assert b.per_frame["pose"][k] + 4.0 * b.per_frame["bone"] == pytest.approx(e_pose(pose, shape, prior, 4.0, t), rel=1e-10)
    lap = LaplacianOperator.from_template(t)
    assert b.per_frame["lap"] + 3.0 * b.per_frame["l2"] == pytest.approx(e_shape(shape, t, lap, 3.0), rel=1e-10)
    # LiDAR term equals the Chamfer value between targets and a fresh cast
    verts, _ = problem.posed(q)
    from pedrecon.raycaster import raycast_mesh

    for k, o in enumerate(obs):
        cast = raycast_mesh(problem.rays[k], (verts[k], t.faces))
        assert b.per_frame["sim"][k] == pytest.approx(chamfer(o.scan.target_points, cast.points), rel=1e-10)


def test_symmetry_classes_constant():
    assert len(SYMMETRY_CLASSES) == 8
