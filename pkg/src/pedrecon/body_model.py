"""Scaled linear-blend-skinning body model.

Each joint ``k`` contributes the block ``[[s_k R_k, (I - s_k R_k) j_k], [0, 1]]``
(a rotation and uniform scale about the rest position of the joint). The
world transform of a joint is the ordered product of the blocks of its
ancestors, root first, including the joint itself. Vertices are displaced
along their rest normals, blended with the skinning weights and finally
translated by the root offset.

The heavy lifting happens in :func:`lbs`, a batched torch kernel that is used
both for plain evaluation and for automatic differentiation during fitting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch

DTYPE = torch.float64


class TemplateError(ValueError):
    """Raised for malformed skeleton templates."""


def rodrigues(axis_angle) -> np.ndarray:
    """Exponentiate an axis-angle vector into a 3x3 rotation matrix."""
    w = np.asarray(axis_angle, dtype=float).reshape(3)
    theta2 = float(w @ w)
    k = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta2 < 1e-16:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def rotation_to_axis_angle(rot) -> np.ndarray:
    """Inverse of :func:`rodrigues`, returning a vector with norm in [0, pi]."""
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(np.asarray(rot, dtype=float)).as_rotvec()


def wrap_axis_angle(axis_angle) -> np.ndarray:
    """Canonicalize axis-angle vectors so that every norm lies in [0, pi]."""
    w = np.asarray(axis_angle, dtype=float)
    flat = w.reshape(-1, 3)
    out = np.empty_like(flat)
    for i, row in enumerate(flat):
        theta = np.linalg.norm(row)
        if theta <= np.pi:
            out[i] = row
            continue
        axis = row / theta
        theta = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
        out[i] = axis * theta
        if np.linalg.norm(out[i]) > np.pi:  # theta == -pi after the mod
            out[i] = -out[i]
    return out.reshape(w.shape)


def rodrigues_torch(rotvec: torch.Tensor) -> torch.Tensor:
    """Batched Rodrigues formula ``(..., 3) -> (..., 3, 3)`` with a Taylor branch at zero."""
    theta2 = (rotvec * rotvec).sum(-1)
    small = theta2 < 1e-16
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = safe2.sqrt()
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    x, y, z = rotvec.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(rotvec.shape + (3,))
    eye = torch.eye(3, dtype=rotvec.dtype).expand_as(k)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def topological_order(parents) -> list[int]:
    """Order joints so that parents precede children; validates the tree."""
    parents = [int(p) for p in parents]
    n = len(parents)
    roots = [k for k, p in enumerate(parents) if p < 0]
    if len(roots) != 1:
        raise TemplateError(f"skeleton must have exactly one root, found {len(roots)}")
    children: list[list[int]] = [[] for _ in range(n)]
    for k, p in enumerate(parents):
        if p >= n:
            raise TemplateError(f"joint {k} has out-of-range parent {p}")
        if p >= 0:
            children[p].append(k)
    order = []
    stack = [roots[0]]
    while stack:
        k = stack.pop()
        order.append(k)
        stack.extend(reversed(children[k]))
    if len(order) != n:
        raise TemplateError("parents do not form a single tree (cycle or disconnected joint)")
    return order


def ancestors(parents, k: int) -> list[int]:
    """Ancestors of joint ``k`` ordered from the root down to ``k`` itself."""
    chain = []
    while k >= 0:
        chain.append(k)
        k = int(parents[k])
    return chain[::-1]


@dataclass(frozen=True, eq=False)
class SkeletonTemplate:
    """Rest mesh, skinning weights and joint tree of the body model.

    ``blend_weights`` is stored dense ``(N, K)``; files keep it sparse.
    ``symmetry_classes`` partitions all joints (the root forms its own class)
    into groups sharing one bone scale.
    """

    vertices: np.ndarray
    normals: np.ndarray
    faces: np.ndarray
    blend_weights: np.ndarray
    joints: np.ndarray
    parents: np.ndarray
    symmetry_classes: tuple[tuple[int, ...], ...]
    joint_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "normals", np.asarray(self.normals, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "joints", np.asarray(self.joints, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "parents", np.asarray(self.parents, dtype=np.int64).reshape(-1))
        w = np.asarray(self.blend_weights, dtype=float)
        object.__setattr__(self, "blend_weights", w.reshape(len(self.vertices), len(self.joints)))
        classes = tuple(tuple(int(j) for j in c) for c in self.symmetry_classes)
        object.__setattr__(self, "symmetry_classes", classes)
        if not self.joint_names:
            names = tuple(f"joint{k}" for k in range(len(self.joints)))
            object.__setattr__(self, "joint_names", names)
        for arr in (self.vertices, self.normals, self.faces, self.blend_weights, self.joints, self.parents):
            arr.flags.writeable = False
        self.validate()

    def validate(self) -> None:
        n, k = len(self.vertices), len(self.joints)
        if len(self.normals) != n:
            raise TemplateError("normals and vertices differ in count")
        if len(self.parents) != k or len(self.joint_names) != k:
            raise TemplateError("parents/joint_names must have one entry per joint")
        self.order  # noqa: B018 - validates the tree
        if not np.all(np.isfinite(self.vertices)) or not np.all(np.isfinite(self.joints)):
            raise TemplateError("non-finite vertex or joint coordinates")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise TemplateError("face references an invalid vertex index")
        if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > 1e-9):
            raise TemplateError("normals must have unit length")
        if np.any(self.blend_weights < 0.0):
            raise TemplateError("blend weights must be non-negative")
        if np.any(np.abs(self.blend_weights.sum(axis=1) - 1.0) > 1e-9):
            raise TemplateError("blend weights of every vertex must sum to 1")
        seen = sorted(j for c in self.symmetry_classes for j in c)
        if seen != list(range(k)):
            raise TemplateError("symmetry_classes must partition the joints")

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_classes(self) -> int:
        return len(self.symmetry_classes)

    @cached_property
    def order(self) -> list[int]:
        return topological_order(self.parents)

    @cached_property
    def joint_class(self) -> np.ndarray:
        out = np.empty(self.n_joints, dtype=np.int64)
        for c, members in enumerate(self.symmetry_classes):
            out[list(members)] = c
        return out

    @cached_property
    def root(self) -> int:
        return self.order[0]

    def joint_index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise KeyError(f"unknown joint {name!r}") from None

    @cached_property
    def tensors(self) -> "ModelTensors":
        return ModelTensors.from_template(self)


@dataclass(frozen=True)
class PoseParams:
    joint_rotations: np.ndarray  # (K, 3) axis-angle, radians
    root_offset: np.ndarray  # (3,) meters

    def __post_init__(self):
        object.__setattr__(self, "joint_rotations", np.asarray(self.joint_rotations, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "root_offset", np.asarray(self.root_offset, dtype=float).reshape(3))
        if not np.all(np.isfinite(self.joint_rotations)):
            raise ValueError("non-finite joint rotation")

    @classmethod
    def identity(cls, template: SkeletonTemplate) -> "PoseParams":
        return cls(np.zeros((template.n_joints, 3)), np.zeros(3))


@dataclass(frozen=True)
class ShapeParams:
    bone_scales: np.ndarray  # (C,) one per symmetry class
    displacements: np.ndarray  # (N,) meters along rest normals

    def __post_init__(self):
        object.__setattr__(self, "bone_scales", np.asarray(self.bone_scales, dtype=float).reshape(-1))
        object.__setattr__(self, "displacements", np.asarray(self.displacements, dtype=float).reshape(-1))
        if np.any(self.bone_scales <= 0.0):
            raise ValueError("bone scales must be positive")
        if not np.all(np.isfinite(self.displacements)):
            raise ValueError("non-finite displacement")

    @classmethod
    def neutral(cls, template: SkeletonTemplate) -> "ShapeParams":
        return cls(np.ones(template.n_classes), np.zeros(len(template.vertices)))


@dataclass(frozen=True)
class JointTransforms:
    matrices: np.ndarray  # (K, 4, 4)
    positions: np.ndarray  # (K, 3) posed joints, root offset included


@dataclass(frozen=True)
class PosedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    provenance: np.ndarray  # template index of each posed vertex

    @classmethod
    def from_arrays(cls, vertices, faces) -> "PosedMesh":
        vertices = np.asarray(vertices, dtype=float)
        return cls(vertices, np.asarray(faces, dtype=np.int64), np.arange(len(vertices)))


@dataclass(frozen=True)
class ModelTensors:
    """Template data as float64 tensors, cached per template."""

    vertices: torch.Tensor
    normals: torch.Tensor
    weights: torch.Tensor
    joints: torch.Tensor
    parents: tuple[int, ...]
    order: tuple[int, ...]
    joint_class: torch.Tensor

    @classmethod
    def from_template(cls, t: SkeletonTemplate) -> "ModelTensors":
        return cls(
            vertices=torch.as_tensor(np.array(t.vertices), dtype=DTYPE),
            normals=torch.as_tensor(np.array(t.normals), dtype=DTYPE),
            weights=torch.as_tensor(np.array(t.blend_weights), dtype=DTYPE),
            joints=torch.as_tensor(np.array(t.joints), dtype=DTYPE),
            parents=tuple(int(p) for p in t.parents),
            order=tuple(t.order),
            joint_class=torch.as_tensor(np.array(t.joint_class)),
        )


def chain_transforms(mt: ModelTensors, rotvecs: torch.Tensor, class_scales: torch.Tensor):
    """World transforms of all joints as ``(T, K, 3, 4)`` affine blocks.

    ``rotvecs`` is ``(T, K, 3)``; ``class_scales`` is ``(C,)``.
    """
    rot = rodrigues_torch(rotvecs)
    s = class_scales[mt.joint_class]
    lin = s[None, :, None, None] * rot
    trans = mt.joints[None] - (lin @ mt.joints[None, :, :, None])[..., 0]
    glin: list = [None] * len(mt.parents)
    gtrans: list = [None] * len(mt.parents)
    for k in mt.order:
        p = mt.parents[k]
        if p < 0:
            glin[k], gtrans[k] = lin[:, k], trans[:, k]
        else:
            glin[k] = glin[p] @ lin[:, k]
            gtrans[k] = (glin[p] @ trans[:, k, :, None])[..., 0] + gtrans[p]
    return torch.cat([torch.stack(glin, 1), torch.stack(gtrans, 1)[..., None]], dim=-1)


def lbs(mt: ModelTensors, rotvecs, offsets, class_scales, displacements):
    """Pose a batch of frames sharing one shape.

    Returns posed vertices ``(T, N, 3)`` and posed joints ``(T, K, 3)``.
    """
    g = chain_transforms(mt, rotvecs, class_scales)
    joints = (g[..., :3] @ mt.joints[None, :, :, None])[..., 0] + g[..., 3] + offsets[:, None, :]
    rest = mt.vertices + mt.normals * displacements[:, None]
    blend = torch.einsum("nk,tkij->tnij", mt.weights, g)
    verts = (blend[..., :3] @ rest[None, :, :, None])[..., 0] + blend[..., 3] + offsets[:, None, :]
    return verts, joints


def _as_t(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def joint_transforms(template: SkeletonTemplate, pose: PoseParams, shape: ShapeParams) -> JointTransforms:
    mt = template.tensors
    with torch.no_grad():
        g = chain_transforms(mt, _as_t(pose.joint_rotations)[None], _as_t(shape.bone_scales))[0]
    g = g.numpy()
    mats = np.zeros((template.n_joints, 4, 4))
    mats[:, :3, :] = g
    mats[:, 3, 3] = 1.0
    pos = np.einsum("kij,kj->ki", g[..., :3], template.joints) + g[..., 3] + pose.root_offset
    return JointTransforms(mats, pos)


def pose_mesh(template: SkeletonTemplate, pose: PoseParams, shape: ShapeParams) -> PosedMesh:
    verts, _ = pose_sequence(template, pose.joint_rotations[None], pose.root_offset[None], shape)
    return PosedMesh(verts[0], template.faces, np.arange(len(template.vertices)))


def pose_sequence(template: SkeletonTemplate, rotations, offsets, shape: ShapeParams):
    """Numpy convenience wrapper around :func:`lbs` for ``T`` frames."""
    with torch.no_grad():
        v, j = lbs(
            template.tensors,
            _as_t(rotations).reshape(-1, template.n_joints, 3),
            _as_t(offsets).reshape(-1, 3),
            _as_t(shape.bone_scales),
            _as_t(shape.displacements),
        )
    return v.numpy(), j.numpy()
