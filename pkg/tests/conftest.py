import numpy as np
import pytest

from pedrecon.body_model import SkeletonTemplate
from pedrecon.motion import default_prior
from pedrecon.template import HumanoidConfig, make_template


@pytest.fixture(scope="session")
def template():
    return make_template()


@pytest.fixture(scope="session")
def coarse_template():
    return make_template(HumanoidConfig(resolution=0.5))


@pytest.fixture(scope="session")
def prior():
    return default_prior()


def chain_template(n_joints=5, n_verts=40, seed=0, hard=False):
    """Straight chain along +x with one vertex cloud; every joint its own class."""
    rng = np.random.default_rng(seed)
    joints = np.c_[np.arange(n_joints) * 0.3, np.zeros(n_joints), np.zeros(n_joints)]
    verts = rng.uniform(-0.1, 0.3 * n_joints, (n_verts, 3)) * [1, 0.2, 0.2]
    normals = rng.normal(size=(n_verts, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if hard:
        w = np.zeros((n_verts, n_joints))
        w[np.arange(n_verts), np.clip((verts[:, 0] / 0.3).astype(int), 0, n_joints - 1)] = 1.0
    else:
        w = rng.uniform(size=(n_verts, n_joints))
        w /= w.sum(1, keepdims=True)
    faces = np.array([[0, 1, 2]])
    return SkeletonTemplate(
        verts, normals, faces, w, joints, np.arange(n_joints) - 1, tuple((k,) for k in range(n_joints))
    )
