import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import chain_template
from pedrecon.body_model import (
    PoseParams,
    ShapeParams,
    SkeletonTemplate,
    TemplateError,
    joint_transforms,
    pose_mesh,
    rodrigues,
    rodrigues_torch,
    topological_order,
    wrap_axis_angle,
)
from pedrecon.template import MIRROR_PAIRS

vec3 = st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3).map(np.array)


def quat_rotate(w, p):
    """Rotate p by exp(w) through the quaternion sandwich q p q*."""
    theta = np.linalg.norm(w)
    if theta == 0:
        return np.array(p, dtype=float)
    a = w / theta
    q = np.r_[np.cos(theta / 2), np.sin(theta / 2) * a]

    def mul(x, y):
        return np.r_[
            x[0] * y[0] - x[1:] @ y[1:],
            x[0] * y[1:] + y[0] * x[1:] + np.cross(x[1:], y[1:]),
        ]

    qc = q * [1, -1, -1, -1]
    return mul(mul(q, np.r_[0.0, p]), qc)[1:]


def test_rodrigues_identity_and_quarter_turn():
    assert np.array_equal(rodrigues([0, 0, 0]), np.eye(3))
    np.testing.assert_allclose(rodrigues([0, 0, np.pi / 2]) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_rodrigues_matches_quaternion_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        w = rng.normal(size=3) * 2
        r = rodrigues(w)
        for p in np.eye(3):
            np.testing.assert_allclose(r @ p, quat_rotate(w, p), atol=1e-10)


@given(vec3)
def test_rodrigues_is_rotation(w):
    r = rodrigues(w)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


@given(vec3)
def test_rodrigues_torch_agrees(w):
    rt = rodrigues_torch(torch.tensor(w, dtype=torch.float64)).numpy()
    np.testing.assert_allclose(rt, rodrigues(w), atol=1e-12)


def test_rodrigues_torch_gradient_at_zero_is_finite():
    w = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    rodrigues_torch(w).sum().backward()
    assert torch.isfinite(w.grad).all()


@given(vec3.map(lambda v: v * 3))
def test_wrap_axis_angle_preserves_rotation(w):
    out = wrap_axis_angle(w)
    assert np.linalg.norm(out) <= np.pi + 1e-12
    np.testing.assert_allclose(rodrigues(out), rodrigues(w), atol=1e-9)


def test_topological_order_rejects_cycles():
    with pytest.raises(TemplateError):
        topological_order([1, 0])
    with pytest.raises(TemplateError):
        topological_order([-1, -1])


def test_identity_transforms_are_identity():
    t = chain_template()
    c = np.array([0.4, -1.0, 2.0])
    jt = joint_transforms(t, PoseParams(np.zeros((5, 3)), c), ShapeParams.neutral(t))
    np.testing.assert_allclose(jt.matrices, np.broadcast_to(np.eye(4), (5, 4, 4)), atol=1e-15)
    np.testing.assert_allclose(jt.positions, t.joints + c, atol=1e-15)
    assert np.all(jt.matrices[:, 3] == [0, 0, 0, 1])


def test_child_scales_about_parent():
    # the parent block carries the scale of the bone leaving it
    t = chain_template(n_joints=2)
    c = np.array([0.1, 0.2, 0.3])
    jt = joint_transforms(t, PoseParams(np.zeros((2, 3)), c), ShapeParams([2.0, 1.0], np.zeros(40)))
    jp, jc = t.joints
    np.testing.assert_allclose(jt.positions[1], c + jp + 2 * (jc - jp), atol=1e-14)


def test_chain_matches_matrix_product_oracle():
    rng = np.random.default_rng(0)
    t = chain_template()
    for _ in range(5):
        rot = rng.normal(size=(5, 3))
        s = rng.uniform(0.7, 1.4, 5)
        c = rng.normal(size=3)
        jt = joint_transforms(t, PoseParams(rot, c), ShapeParams(s, np.zeros(40)))
        acc = np.eye(4)
        for k in range(5):
            local = np.eye(4)
            local[:3, :3] = s[k] * rodrigues(rot[k])
            local[:3, 3] = t.joints[k] - local[:3, :3] @ t.joints[k]
            acc = acc @ local
            np.testing.assert_allclose(jt.matrices[k], acc, atol=1e-10)
            np.testing.assert_allclose(jt.positions[k], acc[:3, :3] @ t.joints[k] + acc[:3, 3] + c, atol=1e-10)


def test_identity_pose_reproduces_template(template):
    v = pose_mesh(template, PoseParams.identity(template), ShapeParams.neutral(template)).vertices
    np.testing.assert_allclose(v, template.vertices, atol=1e-12)
    shifted = pose_mesh(template, PoseParams(np.zeros((17, 3)), [1, 2, 3]), ShapeParams.neutral(template))
    np.testing.assert_allclose(shifted.vertices, template.vertices + [1, 2, 3], atol=1e-12)


def test_hard_weights_rotate_rigidly_about_elbow():
    t = chain_template(n_joints=3, n_verts=60, hard=True)
    rot = np.zeros((3, 3))
    rot[1] = [0, 0, np.pi / 2]
    v = pose_mesh(t, PoseParams(rot, np.zeros(3)), ShapeParams.neutral(t)).vertices
    r = Rotation.from_rotvec([0, 0, np.pi / 2]).as_matrix()
    elbow = t.joints[1]
    owner = t.blend_weights.argmax(1)
    for i, p in enumerate(t.vertices):
        want = p if owner[i] == 0 else elbow + r @ (p - elbow)
        np.testing.assert_allclose(v[i], want, atol=1e-12)


def test_displacement_moves_along_normals(template):
    d = np.full(len(template.vertices), 0.01)
    v = pose_mesh(template, PoseParams.identity(template), ShapeParams(np.ones(template.n_classes), d)).vertices
    np.testing.assert_allclose(v, template.vertices + 0.01 * template.normals, atol=1e-12)


def test_mirrored_pose_mirrors_mesh(template):
    rng = np.random.default_rng(1)
    rot = rng.normal(scale=0.3, size=(17, 3))
    flip = np.diag([1.0, -1.0, 1.0])
    perm = np.arange(17)
    for a, b in MIRROR_PAIRS:
        perm[a], perm[b] = b, a
    # reflection across y: axis-angle maps to (-x, y, -z)
    mrot = (rot * [-1, 1, -1])[perm]
    shape = ShapeParams(rng.uniform(0.9, 1.1, template.n_classes), np.zeros(len(template.vertices)))
    j1 = joint_transforms(template, PoseParams(rot, np.zeros(3)), shape).positions
    j2 = joint_transforms(template, PoseParams(mrot, np.zeros(3)), shape).positions
    np.testing.assert_allclose(j2[perm], j1 @ flip, atol=1e-9)


def test_template_validation_errors():
    t = chain_template()
    with pytest.raises(TemplateError, match="sum to 1"):
        SkeletonTemplate(t.vertices, t.normals, t.faces, t.blend_weights * 2, t.joints, t.parents, t.symmetry_classes)
    with pytest.raises(TemplateError, match="partition"):
        SkeletonTemplate(t.vertices, t.normals, t.faces, t.blend_weights, t.joints, t.parents, ((0, 1),))
    with pytest.raises(ValueError):
        ShapeParams([1.0, -1.0], np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_posed_joints_have_bone_lengths_scaled(seed):
    rng = np.random.default_rng(seed)
    t = chain_template()
    s = rng.uniform(0.6, 1.6, 5)
    jt = joint_transforms(t, PoseParams(rng.normal(size=(5, 3)), np.zeros(3)), ShapeParams(s, np.zeros(40)))
    lengths = np.linalg.norm(np.diff(jt.positions, axis=0), axis=1)
    np.testing.assert_allclose(lengths, 0.3 * np.cumprod(s)[:-1], rtol=1e-10)
