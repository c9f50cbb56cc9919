"""Multi-actor LiDAR sweeps and the synthetic ground-truth generator.

A sweep casts the union of the actors' (and obstacles') ray windows against
all scene geometry at once and keeps the globally closest hit per ray, so
actors occlude each other and obstacles occlude actors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .body_model import PoseParams, ShapeParams, SkeletonTemplate, pose_sequence
from .energy import Camera, FrameObservation, Joints2D
from .optim import ParamBlock
from .raycaster import BoundingBox, LidarScan, RaySet, SensorModel, SimulatedScan, ray_window, raycast_mesh
from .retarget import quat_from_axis_angle, quat_to_axis_angle, slerp
from .motion import GaitStyle, gait_pose

OBSTACLE = -1
BBOX_PAD = 0.05
OBSERVED_JOINTS = (
    "neck",
    "head",
    "shoulder_l",
    "elbow_l",
    "wrist_l",
    "shoulder_r",
    "elbow_r",
    "wrist_r",
    "hip_l",
    "knee_l",
    "ankle_l",
    "hip_r",
    "knee_r",
    "ankle_r",
)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Actor:
    """A skinned body following keyframed parameters."""

    name: str
    template: SkeletonTemplate
    shape: ShapeParams
    timestamps: np.ndarray  # (T,)
    rotations: np.ndarray  # (T, K, 3)
    offsets: np.ndarray  # (T, 3)

    def __post_init__(self):
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=float).reshape(-1))
        object.__setattr__(self, "rotations", np.asarray(self.rotations, dtype=float))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=float).reshape(-1, 3))
        if np.any(np.diff(self.timestamps) <= 0):
            raise SceneError(f"actor {self.name!r}: keyframe times must increase")
        t, k = len(self.timestamps), self.template.n_joints
        if self.rotations.shape != (t, k, 3) or len(self.offsets) != t:
            raise SceneError(f"actor {self.name!r}: keyframes do not match {t} timestamps and {k} joints")
        if len(self.shape.bone_scales) != self.template.n_classes or len(self.shape.displacements) != len(self.template.vertices):
            raise SceneError(f"actor {self.name!r}: shape does not match the template")

    @classmethod
    def static(cls, name, template, shape, pose: PoseParams) -> "Actor":
        return cls(name, template, shape, [-np.inf], pose.joint_rotations[None], pose.root_offset[None])

    def pose_at(self, t: float) -> PoseParams:
        ts = self.timestamps
        if len(ts) == 1 and np.isinf(ts[0]):
            return PoseParams(self.rotations[0], self.offsets[0])
        if t < ts[0] - 1e-9 or t > ts[-1] + 1e-9:
            raise SceneError(f"actor {self.name!r}: time {t} outside its trajectory [{ts[0]}, {ts[-1]}]")
        i = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, max(len(ts) - 2, 0)))
        if len(ts) == 1 or t <= ts[i]:
            return PoseParams(self.rotations[i], self.offsets[i])
        f = min((t - ts[i]) / (ts[i + 1] - ts[i]), 1.0)
        if f == 1.0:
            return PoseParams(self.rotations[i + 1], self.offsets[i + 1])
        q = slerp(quat_from_axis_angle(self.rotations[i]), quat_from_axis_angle(self.rotations[i + 1]), f)
        return PoseParams(quat_to_axis_angle(q), (1 - f) * self.offsets[i] + f * self.offsets[i + 1])

    def mesh_at(self, t: float):
        pose = self.pose_at(t)
        v, _ = pose_sequence(self.template, pose.joint_rotations[None], pose.root_offset[None], self.shape)
        return v[0], self.template.faces


@dataclass(frozen=True)
class Obstacle:
    name: str
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))


@dataclass(frozen=True)
class Scene:
    actors: tuple
    obstacles: tuple
    sensor: SensorModel
    sweep_times: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "actors", tuple(self.actors))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "sweep_times", tuple(float(t) for t in self.sweep_times))
        if any(b <= a for a, b in zip(self.sweep_times, self.sweep_times[1:])):
            raise SceneError("sweep times must increase")


@dataclass(frozen=True)
class Sweep:
    time: float
    merged: SimulatedScan
    labels: np.ndarray  # actor index per point, OBSTACLE for static geometry
    actor_points: list
    obstacle_points: np.ndarray
    actor_bboxes: list


def box_mesh(lo, hi):
    """Closed axis-aligned box (outward winding)."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    f = np.array(
        [
            [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
            [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
            [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
        ]
    )  # fmt: skip
    return v, f


def _window(bbox: BoundingBox, sensor: SensorModel) -> RaySet:
    dummy = LidarScan(np.zeros((0, 3)), np.zeros((0, 3)), bbox, sensor)
    return ray_window(dummy)


def simulate_sweep(scene: Scene, t: float) -> Sweep:
    meshes, owners = [], []
    boxes = []
    for a, actor in enumerate(scene.actors):
        v, f = actor.mesh_at(t)
        meshes.append((v, f))
        owners.append(a)
        boxes.append(BoundingBox.around(v, BBOX_PAD))
    for obs in scene.obstacles:
        meshes.append((obs.vertices, obs.faces))
        owners.append(OBSTACLE)
    windows = [_window(b, scene.sensor) for b in boxes]
    windows += [_window(BoundingBox.around(o.vertices, BBOX_PAD), scene.sensor) for o in scene.obstacles]
    rays = RaySet(np.zeros((0, 2)), scene.sensor)
    for w in windows:
        rays = rays.union(w)
    if not meshes:
        empty = SimulatedScan.empty()
        return Sweep(t, empty, np.zeros(0, np.int64), [], np.zeros((0, 3)), [])
    verts, faces, face_owner = [], [], []
    base = 0
    for (v, f), owner in zip(meshes, owners):
        verts.append(v)
        faces.append(f + base)
        face_owner.append(np.full(len(f), owner))
        base += len(v)
    scan = raycast_mesh(rays, (np.vstack(verts), np.vstack(faces)))
    labels = np.concatenate(face_owner)[scan.faces] if len(scan) else np.zeros(0, np.int64)
    actor_points = [scan.points[labels == a] for a in range(len(scene.actors))]
    return Sweep(t, scan, labels, actor_points, scan.points[labels == OBSTACLE], boxes)


def simulate(scene: Scene) -> list[Sweep]:
    return [simulate_sweep(scene, t) for t in scene.sweep_times]


# --- synthetic ground truth -------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 10
    frame_rate: float = 10.0
    distance: tuple[float, float] = (6.0, 7.0)
    azimuth: tuple[float, float] = (-0.3, 0.3)
    yaw: float = 0.0
    yaw_jitter: float = 0.3
    speed: tuple[float, float] = (1.0, 1.6)
    sensor_height: float = 1.8
    resolution_deg: float = 0.2
    scale_sigma: float = 0.03
    scale_range: tuple[float, float] = (0.8, 1.25)
    displacement_amplitude: float = 0.005
    pose_noise: float = 0.02
    pixel_noise: float = 0.0
    confidence: tuple[float, float] = (0.6, 1.0)
    focal: float = 1000.0
    occluder: bool = False

    def __post_init__(self):
        if self.n_frames < 1 or self.frame_rate <= 0:
            raise ValueError("need at least one frame and a positive frame rate")


@dataclass(frozen=True)
class SynthTruth:
    params: ParamBlock
    vertices: np.ndarray  # (T, N, 3)
    joints: np.ndarray  # (T, K, 3)
    heading: float
    obstacles: tuple = field(default=())


def _truncated_lognormal(rng, sigma, lo, hi, size):
    out = np.empty(size)
    for i in range(size):
        while True:
            s = float(np.exp(rng.normal(0.0, sigma)))
            if lo <= s <= hi:
                out[i] = s
                break
    return out


def smooth_displacements(template: SkeletonTemplate, rng, amplitude: float, n_waves: int = 4) -> np.ndarray:
    """Sum of low-frequency plane waves over rest positions, scaled to ``amplitude``."""
    v = template.vertices
    d = np.zeros(len(v))
    for _ in range(n_waves):
        k = rng.normal(size=3)
        k *= rng.uniform(2.0, 5.0) / np.linalg.norm(k)
        d += rng.normal() * np.sin(v @ k + rng.uniform(0, 2 * np.pi))
    peak = np.abs(d).max()
    return d * (amplitude / peak) if peak > 0 else d


def synth_ground_truth(template: SkeletonTemplate, seed: int, config: SynthConfig | None = None):
    """Sample a walking pedestrian, render scans and 2D joints; return ``(observations, truth)``."""
    cfg = config or SynthConfig()
    rng = np.random.default_rng(seed)
    k_joints = template.n_joints
    res = np.deg2rad(cfg.resolution_deg)
    origin = np.array([0.0, 0.0, cfg.sensor_height])
    sensor = SensorModel(origin, res, res)
    camera = Camera.forward_facing(origin, cfg.focal)

    dist = rng.uniform(*cfg.distance)
    az = rng.uniform(*cfg.azimuth)
    heading = cfg.yaw + rng.uniform(-cfg.yaw_jitter, cfg.yaw_jitter)
    speed = rng.uniform(*cfg.speed)
    style = GaitStyle.sample(rng)
    phase0 = rng.uniform(0.0, 2.0 * np.pi)
    phase_rate = 2.0 * np.pi * speed / 1.5  # about 1.5 m per gait cycle
    scales = _truncated_lognormal(rng, cfg.scale_sigma, *cfg.scale_range, template.n_classes)
    disp = smooth_displacements(template, rng, cfg.displacement_amplitude)

    dt = 1.0 / cfg.frame_rate
    times = np.arange(cfg.n_frames) * dt
    direction = np.array([np.cos(heading), np.sin(heading), 0.0])
    mid = np.array([dist * np.cos(az), dist * np.sin(az), 0.0])
    travel = speed * (times - times.mean())
    offsets = mid[None] + travel[:, None] * direction[None]
    rotations = np.empty((cfg.n_frames, k_joints, 3))
    for t in range(cfg.n_frames):
        pose = gait_pose(phase0 + phase_rate * times[t], style)
        pose = pose + rng.normal(0.0, cfg.pose_noise, size=pose.shape)
        pose[template.root] = [0.0, 0.0, heading]
        rotations[t] = pose
    shape = ShapeParams(scales, disp)
    params = ParamBlock(rotations, offsets, scales, disp)
    verts, joints = pose_sequence(template, rotations, offsets, shape)

    obstacles = []
    if cfg.occluder:
        foot = mid * 0.5  # halfway along the line of sight
        lo = foot + np.array([-0.1, -0.1, 0.0])
        hi = foot + np.array([0.1, 0.1, 1.2])
        obstacles.append(Obstacle("post", *box_mesh(lo, hi)))
    actor = Actor("target", template, shape, times, rotations, offsets)
    scene = Scene((actor,), tuple(obstacles), sensor, tuple(times))

    names = [n for n in OBSERVED_JOINTS if n in template.joint_names]
    idx = np.array([template.joint_index(n) for n in names], dtype=np.int64)
    observations = []
    for t in range(cfg.n_frames):
        sweep = simulate_sweep(scene, times[t])
        bbox = sweep.actor_bboxes[0]
        scan = LidarScan(sweep.actor_points[0], sweep.obstacle_points, bbox, sensor)
        h = np.hstack([joints[t][idx], np.ones((len(idx), 1))]) @ camera.projection.T
        pix = h[:, :2] / h[:, 2:3]
        if cfg.pixel_noise > 0:
            pix = pix + rng.normal(0.0, cfg.pixel_noise, size=pix.shape)
        conf = rng.uniform(*cfg.confidence, size=len(idx))
        observations.append(FrameObservation(scan, Joints2D(tuple(names), pix, conf), camera, float(times[t])))
    truth = SynthTruth(params, verts, joints, heading, tuple(obstacles))
    return observations, truth


def rigid_transform_scene(scene: Scene, rotation, translation) -> Scene:
    """Move every actor, obstacle and the sensor by ``x -> R x + t``."""
    r = np.asarray(rotation, dtype=float)
    tr = np.asarray(translation, dtype=float)
    rot = Rotation.from_matrix(r)
    actors = []
    for a in scene.actors:
        root = a.template.root
        j0 = a.template.joints[root]
        rv = a.rotations.copy()
        rv[:, root] = (rot * Rotation.from_rotvec(a.rotations[:, root])).as_rotvec()
        # the root block rotates about the rest root joint, so compensate its offset
        offs = (a.offsets + j0) @ r.T + tr - j0
        actors.append(Actor(a.name, a.template, a.shape, a.timestamps, rv, offs))
    obstacles = [Obstacle(o.name, o.vertices @ r.T + tr, o.faces) for o in scene.obstacles]
    s = scene.sensor
    sensor = SensorModel(r @ s.origin + tr, s.d_phi, s.d_theta, r @ s.rotation)
    return Scene(actors, obstacles, sensor, scene.sweep_times)
