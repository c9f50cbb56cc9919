"""Asset bank, cycle clipping, speed-based retrieval and Slerp retargeting.

Assets are fitted pedestrians trimmed to one action cycle. A query is a
bird's-eye-view (BEV) polyline with timestamps. Retargeting walks along the
asset cycle by matched arc length, interpolating joint rotations with Slerp
and rotating the root so that the asset's direction of travel follows the
query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .body_model import ShapeParams

SPEED_TOLERANCE = 0.5  # m/s
TAU_POSE = 0.15  # rad
CYCLE_HINT = 1.5  # s, typical action cycle
MIN_CYCLE = 0.75  # s
LINEAR_FALLBACK = 1e-6
MOTION_EPS = 1e-9


class RetargetError(ValueError):
    pass


# --- quaternions (w, x, y, z) -----------------------------------------------


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        if abs(np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2) - 1.0) > 1e-9:
            raise ValueError("quaternion must have unit norm")

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        return cls(*(float(c) for c in np.asarray(q, dtype=float).reshape(4)))

    @property
    def array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])


def quat_from_axis_angle(rotvec) -> np.ndarray:
    xyzw = Rotation.from_rotvec(np.asarray(rotvec, dtype=float).reshape(-1, 3)).as_quat()
    return np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1).reshape(np.shape(rotvec)[:-1] + (4,))


def quat_to_axis_angle(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    flat = q.reshape(-1, 4)
    rv = Rotation.from_quat(np.concatenate([flat[:, 1:], flat[:, :1]], axis=1)).as_rotvec()
    return rv.reshape(q.shape[:-1] + (3,))


def slerp(q0, q1, t):
    """Shortest-arc spherical interpolation of unit quaternions.

    Works on single quaternions or stacks ``(..., 4)``; ``t`` broadcasts.
    """
    if isinstance(q0, Quaternion):
        return Quaternion.from_array(slerp(q0.array, q1.array, t))
    a = np.asarray(q0, dtype=float)
    b = np.asarray(q1, dtype=float)
    t = np.asarray(t, dtype=float)[..., None]
    dot = (a * b).sum(-1, keepdims=True)
    b = np.where(dot < 0, -b, b)
    dot = np.abs(dot)
    angle = np.arccos(np.clip(dot, -1.0, 1.0))
    small = angle < LINEAR_FALLBACK
    sin = np.where(small, 1.0, np.sin(angle))
    wa = np.where(small, 1.0 - t, np.sin((1.0 - t) * angle) / sin)
    wb = np.where(small, t, np.sin(t * angle) / sin)
    out = wa * a + wb * b
    out = out / np.linalg.norm(out, axis=-1, keepdims=True)
    out = np.where(t == 0, a, out)
    return np.where(t == 1, b, out)


def geodesic_distance(rv0, rv1) -> np.ndarray:
    """Rotation angle between paired axis-angle rotations ``(..., 3)``."""
    r0 = Rotation.from_rotvec(np.asarray(rv0, dtype=float).reshape(-1, 3))
    r1 = Rotation.from_rotvec(np.asarray(rv1, dtype=float).reshape(-1, 3))
    return (r0.inv() * r1).magnitude().reshape(np.shape(rv0)[:-1])


# --- trajectories -----------------------------------------------------------


def _arc_length(xy: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _segment_headings(xy: np.ndarray) -> np.ndarray:
    """Heading of each segment; stationary segments hold the last moving heading."""
    d = np.diff(xy, axis=0)
    moving = np.linalg.norm(d, axis=1) > MOTION_EPS
    raw = np.arctan2(d[:, 1], d[:, 0])
    out = np.empty(len(d))
    first = np.flatnonzero(moving)
    last = raw[first[0]] if len(first) else 0.0
    for i in range(len(d)):
        if moving[i]:
            last = raw[i]
        out[i] = last
    return out


def _point_headings(xy: np.ndarray) -> np.ndarray:
    """Per-waypoint heading: outgoing segment, or the incoming one at the end."""
    seg = _segment_headings(xy)
    return np.append(seg, seg[-1])


@dataclass(frozen=True)
class AssetSequence:
    asset_id: str
    shape: ShapeParams
    rotations: np.ndarray  # (T, K, 3)
    offsets: np.ndarray  # (T, 3)
    timestamps: np.ndarray  # (T,)
    cyclic: bool = False
    template_ref: str = "default"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "rotations", np.asarray(self.rotations, dtype=float))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=float).reshape(-1))
        n = len(self.timestamps)
        if n < 2 or len(self.rotations) != n or len(self.offsets) != n:
            raise RetargetError("asset needs at least two frames with matching rotations and offsets")
        if np.any(np.diff(self.timestamps) <= 0):
            raise RetargetError("asset timestamps must be strictly increasing")

    @property
    def bev(self) -> np.ndarray:
        return self.offsets[:, :2]

    @property
    def speeds(self) -> np.ndarray:
        """Speed of each inter-frame interval (m/s)."""
        return np.linalg.norm(np.diff(self.bev, axis=0), axis=1) / np.diff(self.timestamps)

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0])

    def frames(self, start: int, stop: int, cyclic: bool) -> "AssetSequence":
        sl = slice(start, stop + 1)
        return AssetSequence(
            self.asset_id,
            self.shape,
            self.rotations[sl],
            self.offsets[sl],
            self.timestamps[sl],
            cyclic,
            self.template_ref,
            dict(self.metadata),
        )


@dataclass(frozen=True)
class QueryTrajectory:
    timestamps: np.ndarray  # (Q,)
    waypoints: np.ndarray  # (Q, 2) BEV meters

    def __post_init__(self):
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=float).reshape(-1))
        object.__setattr__(self, "waypoints", np.asarray(self.waypoints, dtype=float).reshape(-1, 2))
        if len(self.timestamps) != len(self.waypoints):
            raise RetargetError("query timestamps and waypoints differ in length")
        if len(self.timestamps) < 2:
            raise RetargetError("query needs at least two waypoints")
        if np.any(np.diff(self.timestamps) <= 0):
            raise RetargetError("query timestamps must be strictly increasing")

    @property
    def headings(self) -> np.ndarray:
        return _point_headings(self.waypoints)

    @property
    def speeds(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1) / np.diff(self.timestamps)


@dataclass(frozen=True)
class RetargetedTrajectory:
    timestamps: np.ndarray
    rotations: np.ndarray  # (Q, K, 3)
    offsets: np.ndarray  # (Q, 3)
    shape: ShapeParams
    asset_id: str
    phase: np.ndarray  # arc-length position along the asset cycle


# --- operations -------------------------------------------------------------


def pose_distance(rv0, rv1, root: int = 0) -> float:
    """Mean geodesic angle over non-root joints."""
    keep = [k for k in range(len(rv0)) if k != root]
    return float(geodesic_distance(np.asarray(rv0)[keep], np.asarray(rv1)[keep]).mean())


def clip_cycle(seq: AssetSequence, tau_pose: float = TAU_POSE, min_len: float = MIN_CYCLE, root: int = 0) -> AssetSequence:
    """Earliest window ``[t0, t1]`` of length >= ``min_len`` whose end poses match."""
    ts = seq.timestamps
    if seq.duration + 1e-12 < min_len:
        raise RetargetError(f"sequence lasts {seq.duration:.3f} s, shorter than the minimum cycle {min_len} s")
    for i0 in range(len(ts)):
        for i1 in range(i0 + 1, len(ts)):
            if ts[i1] - ts[i0] + 1e-9 < min_len:
                continue
            if pose_distance(seq.rotations[i0], seq.rotations[i1], root) < tau_pose:
                out = seq.frames(i0, i1, cyclic=True)
                out.metadata["cycle_bounds"] = [float(ts[i0]), float(ts[i1])]
                return out
    raise RetargetError(f"no action cycle closes within {tau_pose} rad")


class AssetBank:
    """Immutable collection of assets keyed and ordered by id."""

    def __init__(self, assets=()):
        by_id: dict[str, AssetSequence] = {}
        for a in assets:
            if a.asset_id in by_id:
                raise RetargetError(f"duplicate asset id {a.asset_id!r}")
            by_id[a.asset_id] = a
        self._assets = dict(sorted(by_id.items()))

    def __len__(self) -> int:
        return len(self._assets)

    def __iter__(self):
        return iter(self._assets.values())

    def __getitem__(self, asset_id: str) -> AssetSequence:
        return self._assets[asset_id]

    def ids(self) -> list[str]:
        return list(self._assets)

    def with_asset(self, asset: AssetSequence) -> "AssetBank":
        return AssetBank([*self, asset])


def aligned_speeds(asset: AssetSequence, query: QueryTrajectory) -> np.ndarray:
    """Asset interval speed at each query interval midpoint, cycling through the asset."""
    mid = 0.5 * (query.timestamps[:-1] + query.timestamps[1:]) - query.timestamps[0]
    rel = np.mod(mid, asset.duration) + asset.timestamps[0]
    idx = np.clip(np.searchsorted(asset.timestamps, rel, side="right") - 1, 0, len(asset.timestamps) - 2)
    return asset.speeds[idx]


def speed_gaps(bank, query: QueryTrajectory) -> dict[str, tuple[float, float]]:
    """``(max, mean)`` absolute speed difference of every asset against the query."""
    qs = query.speeds
    out = {}
    for asset in bank:
        gap = np.abs(aligned_speeds(asset, query) - qs)
        out[asset.asset_id] = (float(gap.max()), float(gap.mean()))
    return out


def retrieve(bank, query: QueryTrajectory, tolerance: float = SPEED_TOLERANCE) -> AssetSequence:
    assets = {a.asset_id: a for a in bank}
    if not assets:
        raise RetargetError("asset bank is empty")
    gaps = speed_gaps(assets.values(), query)
    ok = {k: mean for k, (worst, mean) in gaps.items() if worst <= tolerance + 1e-9}
    if not ok:
        raise RetargetError(f"no asset stays within {tolerance} m/s of the query speed")
    best = min(ok.values())
    return assets[min(k for k, m in ok.items() if m <= best + 1e-12)]


def _rz(angle: float) -> Rotation:
    return Rotation.from_rotvec([0.0, 0.0, angle])


def retarget_sequence(asset: AssetSequence, query: QueryTrajectory, root: int = 0) -> RetargetedTrajectory:
    if not asset.cyclic:
        raise RetargetError(f"asset {asset.asset_id!r} is not a clipped cycle")
    s_a = _arc_length(asset.bev)
    length = s_a[-1]
    if length <= MOTION_EPS:
        raise RetargetError(f"asset {asset.asset_id!r} does not move in BEV")
    s_q = _arc_length(query.waypoints)
    if s_q[-1] <= MOTION_EPS:
        raise RetargetError("query trajectory has zero length")
    # phase in (0, L] so that the end of one lap maps onto the last keyframe
    laps = np.maximum(np.ceil(s_q / length) - 1.0, 0.0)
    phase = s_q - laps * length
    n = len(s_a)
    idx = np.clip(np.searchsorted(s_a, phase, side="right") - 1, 0, n - 2)
    seg = s_a[idx + 1] - s_a[idx]
    frac = np.where(seg > 0, (phase - s_a[idx]) / np.where(seg > 0, seg, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)

    qa = quat_from_axis_angle(asset.rotations)
    rot = np.empty((len(phase),) + asset.rotations.shape[1:])
    for q, (i, f) in enumerate(zip(idx, frac)):
        if f == 0.0:
            rot[q] = asset.rotations[i]
        elif f == 1.0:
            rot[q] = asset.rotations[i + 1]
        else:
            rot[q] = quat_to_axis_angle(slerp(qa[i], qa[i + 1], f))

    head_a = _point_headings(asset.bev)
    seg_head = _segment_headings(asset.bev)
    psi_a = np.where(frac == 1.0, head_a[np.minimum(idx + 1, n - 1)], seg_head[idx])
    psi_a = np.where(frac == 0.0, head_a[idx], psi_a)
    turn = query.headings - psi_a
    for q in range(len(phase)):
        if turn[q] != 0.0:
            rot[q, root] = (_rz(turn[q]) * Rotation.from_rotvec(rot[q, root])).as_rotvec()

    z = asset.offsets[idx, 2] * (1.0 - frac) + asset.offsets[np.minimum(idx + 1, n - 1), 2] * frac
    z = np.where(frac == 0.0, asset.offsets[idx, 2], z)
    offsets = np.column_stack([query.waypoints, z])
    return RetargetedTrajectory(query.timestamps.copy(), rot, offsets, asset.shape, asset.asset_id, phase)
