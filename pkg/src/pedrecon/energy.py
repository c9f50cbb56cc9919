"""Energy terms for sequence fitting.

The per-frame objective is

    w_sim * E_sim + w_joint * E_joint + w_pose * GMM_nll + w_bone * bone
    + w_lap * laplacian + w_l2 * l2

summed over frames. ``E_sim`` is the symmetric mean-squared Chamfer distance
between observed LiDAR points and points ray-cast on the posed mesh through
the occlusion-masked ray window. Gradients treat nearest-neighbour pairings
and ray hits (face, u, v) as constants of one evaluation; see
:class:`Correspondences`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.sparse import csr_matrix
from scipy.spatial import cKDTree

from .body_model import DTYPE, PoseParams, ShapeParams, SkeletonTemplate, lbs, pose_sequence
from .gmm import GmmPrior, gmm_nll_torch
from .optim import ParamBlock
from .raycaster import LidarScan, RaySet, SimulatedScan, observation_rays, raycast_mesh

log = logging.getLogger(__name__)

TERMS = ("sim", "joint", "pose", "bone", "lap", "l2")


class ChamferError(ValueError):
    pass


class ProjectionError(ValueError):
    pass


class ObservationError(ValueError):
    def __init__(self, message, frame=None):
        super().__init__(message if frame is None else f"frame {frame}: {message}")
        self.frame = frame


@dataclass(frozen=True)
class Joints2D:
    names: tuple[str, ...]
    pixels: np.ndarray  # (M, 2)
    confidence: np.ndarray  # (M,) in [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "confidence", np.asarray(self.confidence, dtype=float).reshape(-1))
        if not (len(self.names) == len(self.pixels) == len(self.confidence)):
            raise ValueError("names, pixels and confidences must have equal length")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("non-finite 2D joint")
        if np.any((self.confidence < 0) | (self.confidence > 1)):
            raise ValueError("confidences must lie in [0, 1]")

    def indices(self, template: SkeletonTemplate) -> np.ndarray:
        return np.array([template.joint_index(n) for n in self.names], dtype=np.int64)


@dataclass(frozen=True)
class Camera:
    projection: np.ndarray  # (3, 4)
    image_size: tuple[int, int] = (1920, 1200)

    def __post_init__(self):
        object.__setattr__(self, "projection", np.asarray(self.projection, dtype=float).reshape(3, 4))
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))

    @classmethod
    def pinhole(cls, focal, center, rotation, translation, image_size=(1920, 1200)) -> "Camera":
        k = np.array([[focal, 0.0, center[0]], [0.0, focal, center[1]], [0.0, 0.0, 1.0]])
        rt = np.hstack([np.asarray(rotation, float), np.asarray(translation, float).reshape(3, 1)])
        return cls(k @ rt, image_size)

    @classmethod
    def forward_facing(cls, origin, focal: float = 1000.0, image_size=(1920, 1200)) -> "Camera":
        """Camera at ``origin`` looking along +x with +z up in the image."""
        rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        center = (image_size[0] / 2.0, image_size[1] / 2.0)
        return cls.pinhole(focal, center, rot, -rot @ np.asarray(origin, float), image_size)


@dataclass(frozen=True)
class EnergyWeights:
    sim: float = 144.0**2
    joint: float = 0.2**2
    pose: float = 0.478**2
    bone: float = 2.0**2
    l2: float = 100.0**2
    lap: float = 1000.0**2
    sigma: float = 100.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"weight {name} must be finite and non-negative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def weight(self, term: str) -> float:
        return getattr(self, term)


@dataclass(frozen=True)
class FrameObservation:
    scan: LidarScan
    joints2d: Joints2D
    camera: Camera
    timestamp: float


class LaplacianOperator:
    """Row-normalized mesh Laplacian ``L x_i = sum_j w_ij x_j - x_i`` (rows sum to zero)."""

    def __init__(self, n_vertices: int, faces, vertices=None, kind: str = "uniform"):
        faces = np.asarray(faces, dtype=np.int64)
        i = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2], faces[:, 1], faces[:, 2], faces[:, 0]])
        j = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0], faces[:, 0], faces[:, 1], faces[:, 2]])
        if kind == "uniform":
            w = np.ones(len(i))
            adj = csr_matrix((w, (i, j)), shape=(n_vertices, n_vertices))
            adj.data[:] = 1.0  # collapse duplicate edges
        elif kind == "cotangent":
            if vertices is None:
                raise ValueError("cotangent weights need vertex positions")
            adj = _cotangent_adjacency(np.asarray(vertices, float), faces, n_vertices)
        else:
            raise ValueError(f"unknown Laplacian kind {kind!r}")
        deg = np.asarray(adj.sum(axis=1)).ravel()
        deg[deg == 0] = 1.0
        coo = adj.tocoo()
        self.kind = kind
        self.rows = coo.row.astype(np.int64)
        self.cols = coo.col.astype(np.int64)
        self.vals = coo.data / deg[coo.row]
        self.n = n_vertices
        self.matrix = csr_matrix((self.vals, (self.rows, self.cols)), shape=(n_vertices, n_vertices)) - _eye(n_vertices)
        self._t = (torch.tensor(np.array(self.rows)), torch.tensor(np.array(self.cols)), torch.tensor(np.array(self.vals), dtype=DTYPE))

    @classmethod
    def from_template(cls, template: SkeletonTemplate, kind: str = "uniform") -> "LaplacianOperator":
        return cls(len(template.vertices), template.faces, template.vertices, kind)

    def apply(self, x) -> np.ndarray:
        return self.matrix @ np.asarray(x, dtype=float)

    def apply_torch(self, x: torch.Tensor) -> torch.Tensor:
        rows, cols, vals = self._t
        shape = (-1,) + (1,) * (x.dim() - 1)
        return torch.zeros_like(x).index_add_(0, rows, vals.reshape(shape) * x[cols]) - x

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def _eye(n):
    from scipy.sparse import identity

    return identity(n, format="csr")


def _cotangent_adjacency(v, f, n):
    rows, cols, vals = [], [], []
    for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        # angle at corner c is opposite edge (a, b)
        u = v[f[:, a]] - v[f[:, c]]
        w = v[f[:, b]] - v[f[:, c]]
        cot = (u * w).sum(1) / np.maximum(np.linalg.norm(np.cross(u, w), axis=1), 1e-12)
        cot = np.maximum(cot, 1e-6) / 2.0
        rows += [f[:, a], f[:, b]]
        cols += [f[:, b], f[:, a]]
        vals += [cot, cot]
    return csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


# --- individual terms -------------------------------------------------------


def chamfer_pairs(x, y):
    """Nearest-neighbour indices ``x -> y`` and ``y -> x``."""
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    y = np.asarray(y, dtype=float).reshape(-1, 3)
    if len(x) == 0 or len(y) == 0:
        raise ChamferError("Chamfer distance needs two non-empty point sets")
    _, nn_xy = cKDTree(y).query(x)
    _, nn_yx = cKDTree(x).query(y)
    return nn_xy, nn_yx


def chamfer(x, y) -> float:
    """Mean squared nearest-neighbour distance ``x -> y`` plus ``y -> x``."""
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    y = np.asarray(y, dtype=float).reshape(-1, 3)
    nn_xy, nn_yx = chamfer_pairs(x, y)
    return float(((x - y[nn_xy]) ** 2).sum(1).mean() + ((y - x[nn_yx]) ** 2).sum(1).mean())


def geman_mcclure(x, sigma: float = 100.0):
    """Robust penalty ``x^2 sigma^2 / (x^2 + sigma^2)``, saturating at ``sigma^2``."""
    x2 = x * x
    return x2 * sigma**2 / (x2 + sigma**2)


def project(camera: Camera, point) -> np.ndarray:
    h = camera.projection @ np.append(np.asarray(point, dtype=float).reshape(3), 1.0)
    if h[2] <= 0:
        raise ProjectionError("point is not in front of the camera")
    return h[:2] / h[2]


def e_joint(posed_joints, joints2d: Joints2D, camera: Camera, sigma: float, index) -> float:
    """Confidence-weighted robust reprojection error; joints behind the camera contribute zero."""
    total = 0.0
    for k, p, m in zip(np.asarray(index), joints2d.pixels, joints2d.confidence):
        try:
            pix = project(camera, posed_joints[k])
        except ProjectionError:
            continue
        total += m * geman_mcclure(np.linalg.norm(pix - p), sigma)
    return float(total)


def _prior_vector(rotations, prior: GmmPrior, root: int):
    """Pose vector seen by the GMM: all joints or all but the root."""
    k = rotations.shape[-2]
    if prior.dim == 3 * k:
        return rotations.reshape(rotations.shape[:-2] + (-1,))
    if prior.dim == 3 * (k - 1):
        keep = [j for j in range(k) if j != root]
        return rotations[..., keep, :].reshape(rotations.shape[:-2] + (-1,))
    raise ValueError(f"GMM dimension {prior.dim} does not match {k} joints")


def bone_prior(template: SkeletonTemplate, class_scales) -> float:
    s = np.asarray(class_scales, dtype=float)[template.joint_class]
    cum = np.empty_like(s)
    for k in template.order:
        p = template.parents[k]
        cum[k] = s[k] * (cum[p] if p >= 0 else 1.0)
    return float(((cum - 1.0) ** 2).sum())


def e_pose(pose: PoseParams, shape: ShapeParams, gmm: GmmPrior, lambda_bone: float, template: SkeletonTemplate) -> float:
    x = _prior_vector(pose.joint_rotations, gmm, template.root)
    return gmm.nll(x) + lambda_bone * bone_prior(template, shape.bone_scales)


def e_shape(shape: ShapeParams, template: SkeletonTemplate, lap: LaplacianOperator, lambda_l2: float) -> float:
    d = shape.displacements
    ld = lap.apply(template.normals * d[:, None])
    return float((ld**2).sum() + lambda_l2 * (d**2).sum())


# --- sequence objective -----------------------------------------------------


@dataclass
class Correspondences:
    """Ray hits and Chamfer pairings frozen for one gradient evaluation."""

    hits: list  # SimulatedScan or None per frame
    nn_xy: list
    nn_yx: list
    in_front: np.ndarray  # (T, M) joints with positive depth


@dataclass
class EnergyBreakdown:
    total: float
    terms: dict  # weighted sums over frames
    per_frame: dict = field(default_factory=dict)  # unweighted per-frame values

    def __getitem__(self, key):
        return self.terms[key]


def _bone_torch(template: SkeletonTemplate, class_scales: torch.Tensor) -> torch.Tensor:
    s = class_scales[template.tensors.joint_class]
    cum: list = [None] * template.n_joints
    for k in template.order:
        p = template.parents[k]
        cum[k] = s[k] if p < 0 else cum[p] * s[k]
    return ((torch.stack(cum) - 1.0) ** 2).sum()


class SequenceEnergy:
    """Objective over a sequence of observations sharing one shape."""

    def __init__(
        self,
        template: SkeletonTemplate,
        observations,
        gmm: GmmPrior,
        weights: EnergyWeights | None = None,
        laplacian: LaplacianOperator | None = None,
        rays: list | None = None,
    ):
        self.template = template
        self.observations = list(observations)
        self.gmm = gmm
        self.weights = weights or EnergyWeights()
        self.laplacian = laplacian or LaplacianOperator.from_template(template)
        self.faces = template.faces
        self.rays: list[RaySet] = rays if rays is not None else [observation_rays(o.scan) for o in self.observations]
        self.targets = [o.scan.target_points for o in self.observations]
        self.trees = [cKDTree(x) if len(x) else None for x in self.targets]
        self.x_t = [torch.tensor(np.array(x), dtype=DTYPE) for x in self.targets]
        self.joint_idx = [o.joints2d.indices(template) for o in self.observations]
        self.proj_t = [torch.tensor(np.array(o.camera.projection), dtype=DTYPE) for o in self.observations]
        self.pix_t = [torch.tensor(np.array(o.joints2d.pixels), dtype=DTYPE) for o in self.observations]
        self.conf_t = [torch.tensor(np.array(o.joints2d.confidence), dtype=DTYPE) for o in self.observations]
        self.faces_t = torch.as_tensor(np.array(self.faces))
        self.normals_t = torch.as_tensor(np.array(template.normals), dtype=DTYPE)
        _prior_vector(np.zeros((1, template.n_joints, 3)), gmm, template.root)

    @property
    def n_frames(self) -> int:
        return len(self.observations)

    def posed(self, params: ParamBlock):
        shape = ShapeParams(params.scales, params.displacements)
        return pose_sequence(self.template, params.rotations, params.offsets, shape)

    def correspondences(self, params: ParamBlock, frames=None) -> Correspondences:
        verts, joints = self.posed(params)
        hits, nn_xy, nn_yx = [], [], []
        front = []
        for t in range(self.n_frames):
            obs = self.observations[t]
            h = np.append(joints[t][self.joint_idx[t]], np.ones((len(self.joint_idx[t]), 1)), axis=1)
            front.append((h @ obs.camera.projection.T)[:, 2] > 0)
            if (frames is not None and t not in frames) or self.trees[t] is None or self.weights.sim == 0:
                hits.append(None)
                nn_xy.append(None)
                nn_yx.append(None)
                continue
            scan = raycast_mesh(self.rays[t], (verts[t], self.faces))
            if len(scan) == 0:
                log.warning("frame %d: no ray hits the posed mesh, skipping the LiDAR term", t)
                hits.append(None)
                nn_xy.append(None)
                nn_yx.append(None)
                continue
            _, a = cKDTree(scan.points).query(self.targets[t])
            _, b = self.trees[t].query(scan.points)
            hits.append(scan)
            nn_xy.append(torch.as_tensor(a))
            nn_yx.append(torch.as_tensor(b))
        return Correspondences(hits, nn_xy, nn_yx, np.array(front, dtype=bool).reshape(self.n_frames, -1))

    def frame_terms(self, tensors: dict, corr: Correspondences) -> dict:
        """Unweighted terms as tensors: per-frame ``(T,)`` for data/pose, scalars for shape."""
        t_count = self.n_frames
        verts, joints = lbs(
            self.template.tensors, tensors["rotations"], tensors["offsets"], tensors["scales"], tensors["displacements"]
        )
        zero = verts.new_zeros(())
        sim = []
        joint = []
        sigma2 = self.weights.sigma**2
        for t in range(t_count):
            hit: SimulatedScan | None = corr.hits[t]
            if hit is None:
                sim.append(zero)
            else:
                tri = verts[t][self.faces_t[torch.as_tensor(hit.faces)]]
                bary = torch.as_tensor(hit.barycentric_weights(), dtype=DTYPE)
                y = (bary[:, :, None] * tri).sum(1)
                x = self.x_t[t]
                ex = ((x - y[corr.nn_xy[t]]) ** 2).sum(1).mean()
                ey = ((y - x[corr.nn_yx[t]]) ** 2).sum(1).mean()
                sim.append(ex + ey)
            idx = self.joint_idx[t]
            if len(idx) == 0:
                joint.append(zero)
                continue
            front = torch.as_tensor(corr.in_front[t])
            pj = joints[t][torch.as_tensor(idx)]
            proj = self.proj_t[t]
            h = pj @ proj[:, :3].T + proj[:, 3]
            depth = torch.where(front, h[:, 2], torch.ones_like(h[:, 2]))
            pix = h[:, :2] / depth[:, None]
            r2 = ((pix - self.pix_t[t]) ** 2).sum(1)
            rho = r2 * sigma2 / (r2 + sigma2)
            joint.append((self.conf_t[t] * torch.where(front, rho, torch.zeros_like(rho))).sum())
        x_pose = _prior_vector(tensors["rotations"], self.gmm, self.template.root)
        d = tensors["displacements"]
        lap = (self.laplacian.apply_torch(self.normals_t * d[:, None]) ** 2).sum()
        return {
            "sim": torch.stack(sim),
            "joint": torch.stack(joint),
            "pose": gmm_nll_torch(self.gmm, x_pose),
            "bone": _bone_torch(self.template, tensors["scales"]),
            "lap": lap,
            "l2": (d * d).sum(),
        }

    def weighted(self, raw: dict) -> dict:
        w = self.weights
        t = self.n_frames
        return {
            "sim": w.sim * raw["sim"].sum(),
            "joint": w.joint * raw["joint"].sum(),
            "pose": w.pose * raw["pose"].sum(),
            "bone": w.bone * t * raw["bone"],
            "lap": w.lap * t * raw["lap"],
            "l2": w.l2 * t * raw["l2"],
        }

    def objective(self, corr: Correspondences):
        """Differentiable closure over frozen correspondences, for :mod:`optim`."""

        def f(tensors):
            terms = self.weighted(self.frame_terms(tensors, corr))
            total = terms["sim"]
            for name in TERMS[1:]:
                total = total + terms[name]
            return total, terms

        return f

    def term_objective(self, corr: Correspondences, term: str, weighted: bool = False):
        def f(tensors):
            raw = self.frame_terms(tensors, corr)
            value = self.weighted(raw)[term] if weighted else raw[term].sum()
            return value, {term: value}

        return f

    def evaluate(self, params: ParamBlock, corr: Correspondences | None = None) -> EnergyBreakdown:
        corr = corr or self.correspondences(params)
        with torch.no_grad():
            raw = self.frame_terms(params.tensors(), corr)
            terms = self.weighted(raw)
        values = {k: float(v) for k, v in terms.items()}
        total = 0.0
        for name in TERMS:
            total += values[name]
        per_frame = {k: (v.numpy().copy() if v.dim() else float(v)) for k, v in raw.items()}
        return EnergyBreakdown(total, values, per_frame)


def total_energy(
    params: ParamBlock,
    observations,
    template: SkeletonTemplate,
    gmm: GmmPrior,
    weights: EnergyWeights | None = None,
    laplacian: LaplacianOperator | None = None,
) -> EnergyBreakdown:
    try:
        problem = SequenceEnergy(template, observations, gmm, weights, laplacian)
    except ValueError as exc:
        raise ObservationError(str(exc)) from exc
    return problem.evaluate(params)
