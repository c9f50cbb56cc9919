"""LiDAR ray windows, occlusion masking and closest-hit ray casting.

Angles are measured in the sensor frame: azimuth ``atan2(y, x)`` and
elevation ``asin(z / r)``. Ray ``(i, j)`` points at azimuth ``i * d_phi`` and
elevation ``j * d_theta``.

Triangle intersection uses the edge convention ``e1 = v2 - v1`` and
``e2 = v3 - v2`` so a hit is ``(1 - u) v1 + (u - v) v2 + v v3`` and lies
inside the triangle iff ``0 <= v <= u <= 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_NEAR = 1e-6
DEGENERATE = 1e-9
# floor() of an angle that was generated exactly on a lattice direction must
# not drop to the previous cell through rounding
CELL_SNAP = 1e-9


def _cell(angle, res):
    return np.floor(np.asarray(angle) / res + CELL_SNAP).astype(np.int64)


@dataclass(frozen=True)
class SensorModel:
    origin: np.ndarray
    d_phi: float
    d_theta: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # sensor -> world

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        if not (self.d_phi > 0 and self.d_theta > 0):
            raise ValueError("sensor resolutions must be positive")

    def to_sensor(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float).reshape(-1, 3) - self.origin) @ self.rotation

    def spherical(self, points):
        """Radius, azimuth and elevation of world points in the sensor frame."""
        p = self.to_sensor(points)
        r = np.linalg.norm(p, axis=1)
        phi = np.arctan2(p[:, 1], p[:, 0])
        theta = np.arcsin(np.clip(p[:, 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))
        return r, phi, theta

    def directions(self, lattice) -> np.ndarray:
        ij = np.asarray(lattice, dtype=float).reshape(-1, 2)
        phi = ij[:, 0] * self.d_phi
        theta = ij[:, 1] * self.d_theta
        d = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)], axis=1)
        return d @ self.rotation.T


@dataclass(frozen=True)
class BoundingBox:
    """Oriented box; ``rotation`` maps box axes to world axes."""

    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "half_extents", np.asarray(self.half_extents, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        if np.any(self.half_extents <= 0):
            raise ValueError("bounding box extents must be positive")

    @classmethod
    def around(cls, points, pad: float = 0.0) -> "BoundingBox":
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        lo, hi = p.min(axis=0) - pad, p.max(axis=0) + pad
        return cls((lo + hi) / 2.0, np.maximum((hi - lo) / 2.0, 1e-6))

    def corners(self) -> np.ndarray:
        signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
        return self.center + (signs * self.half_extents) @ self.rotation.T

    def contains(self, points) -> np.ndarray:
        local = (np.asarray(points, dtype=float).reshape(-1, 3) - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.half_extents, axis=1)


@dataclass(frozen=True)
class LidarScan:
    target_points: np.ndarray
    obstacle_points: np.ndarray
    bbox: BoundingBox
    sensor: SensorModel

    def __post_init__(self):
        for name in ("target_points", "obstacle_points"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1, 3)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite coordinates")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class WindowBounds:
    phi_min: float
    phi_max: float
    theta_min: float
    theta_max: float
    r_min: float
    r_max: float

    @property
    def phi_center(self) -> float:
        return 0.5 * (self.phi_min + self.phi_max)


@dataclass(frozen=True)
class RaySet:
    lattice: np.ndarray  # (R, 2) integer (i, j)
    sensor: SensorModel
    bounds: WindowBounds | None = None

    def __post_init__(self):
        object.__setattr__(self, "lattice", np.asarray(self.lattice, dtype=np.int64).reshape(-1, 2))

    def __len__(self) -> int:
        return len(self.lattice)

    def directions(self) -> np.ndarray:
        return self.sensor.directions(self.lattice)

    def without(self, cells) -> "RaySet":
        cells = set(cells)
        keep = np.array([(int(i), int(j)) not in cells for i, j in self.lattice], dtype=bool)
        return RaySet(self.lattice[keep], self.sensor, self.bounds)

    def union(self, other: "RaySet") -> "RaySet":
        both = np.unique(np.vstack([self.lattice, other.lattice]), axis=0)
        return RaySet(both, self.sensor, None)


@dataclass(frozen=True)
class TriangleHit:
    face: int
    distance: float
    u: float
    v: float
    point: np.ndarray


@dataclass(frozen=True)
class SimulatedScan:
    """Ray-cast points with the hit provenance needed for gradients."""

    points: np.ndarray  # (H, 3)
    lattice: np.ndarray  # (H, 2) ray of each point
    faces: np.ndarray  # (H,) hit face index
    u: np.ndarray
    v: np.ndarray
    distance: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "SimulatedScan":
        z = np.zeros(0)
        return cls(np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64), z, z, z)

    def barycentric_weights(self) -> np.ndarray:
        return np.stack([1.0 - self.u, self.u - self.v, self.v], axis=1)

    def reconstruct(self, vertices, faces) -> np.ndarray:
        tri = np.asarray(vertices)[np.asarray(faces)[self.faces]]
        return np.einsum("hc,hcd->hd", self.barycentric_weights(), tri)


def window_bounds(bbox: BoundingBox, sensor: SensorModel) -> WindowBounds:
    r, phi, theta = sensor.spherical(bbox.corners())
    if phi.max() - phi.min() > np.pi:  # box straddles the +-pi seam
        phi = np.where(phi < 0, phi + 2.0 * np.pi, phi)
    return WindowBounds(phi.min(), phi.max(), theta.min(), theta.max(), r.min(), r.max())


def ray_window(scan: LidarScan, sensor: SensorModel | None = None) -> RaySet:
    """All lattice rays strictly inside the floor-bounded angular window of the box."""
    sensor = sensor or scan.sensor
    b = window_bounds(scan.bbox, sensor)
    return RaySet(window_lattice(b, sensor), sensor, b)


def window_lattice(b: WindowBounds, sensor: SensorModel) -> np.ndarray:
    """Cells ``(i, j)`` with ``floor(min / d) < i < floor(max / d)`` in both angles."""
    i = np.arange(_cell(b.phi_min, sensor.d_phi) + 1, _cell(b.phi_max, sensor.d_phi))
    j = np.arange(_cell(b.theta_min, sensor.d_theta) + 1, _cell(b.theta_max, sensor.d_theta))
    ii, jj = np.meshgrid(i, j, indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=1)


def occluded_rays(scan: LidarScan, sensor: SensorModel | None = None, window: RaySet | None = None) -> set:
    """Lattice cells of witness points lying in front of the target box."""
    sensor = sensor or scan.sensor
    b = window.bounds if window is not None and window.bounds is not None else window_bounds(scan.bbox, sensor)
    pts = scan.obstacle_points
    if len(pts) == 0:
        return set()
    r, phi, theta = sensor.spherical(pts)
    phi = np.where(phi < b.phi_center - np.pi, phi + 2.0 * np.pi, phi)
    sel = (
        (r < b.r_min)
        & (phi > b.phi_min)
        & (phi < b.phi_max)
        & (theta > b.theta_min)
        & (theta < b.theta_max)
        & ~scan.bbox.contains(pts)
    )
    ci = _cell(phi[sel], sensor.d_phi)
    cj = _cell(theta[sel], sensor.d_theta)
    return set(zip(ci.tolist(), cj.tolist()))


def observation_rays(scan: LidarScan) -> RaySet:
    """Ray window of a scan with the occluded cells removed."""
    window = ray_window(scan)
    return window.without(occluded_rays(scan, scan.sensor, window))


def _mt(o, d, p1, p2, p3):
    """Per-pair intersection ``(c, u, v, ok)``; every argument broadcasts over rows.

    Components are spelled out so that the result of a pair does not depend
    on how pairs are batched.
    """
    e1x, e1y, e1z = p2[:, 0] - p1[:, 0], p2[:, 1] - p1[:, 1], p2[:, 2] - p1[:, 2]
    e2x, e2y, e2z = p3[:, 0] - p2[:, 0], p3[:, 1] - p2[:, 1], p3[:, 2] - p2[:, 2]
    tx, ty, tz = o[:, 0] - p1[:, 0], o[:, 1] - p1[:, 1], o[:, 2] - p1[:, 2]
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    # p = d x e2, q = t x e1
    px, py, pz = dy * e2z - dz * e2y, dz * e2x - dx * e2z, dx * e2y - dy * e2x
    qx, qy, qz = ty * e1z - tz * e1y, tz * e1x - tx * e1z, tx * e1y - ty * e1x
    den = px * e1x + py * e1y + pz * e1z
    good = np.abs(den) >= DEGENERATE
    inv = 1.0 / np.where(good, den, 1.0)
    c = (qx * e2x + qy * e2y + qz * e2z) * inv
    u = (px * tx + py * ty + pz * tz) * inv
    v = (qx * dx + qy * dy + qz * dz) * inv
    ok = good & (c > EPS_NEAR) & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (v <= u)
    return c, u, v, ok


def _mesh_arrays(mesh):
    if isinstance(mesh, tuple):
        verts, faces = mesh
    else:
        verts, faces = mesh.vertices, mesh.faces
    return np.asarray(verts, dtype=float), np.asarray(faces, dtype=np.int64)


def intersect(origin, direction, mesh) -> TriangleHit | None:
    """Closest hit of one ray against every triangle of ``mesh``."""
    verts, faces = _mesh_arrays(mesh)
    if len(faces) == 0:
        return None
    tri = verts[faces]
    o = np.broadcast_to(np.asarray(origin, float).reshape(1, 3), (len(faces), 3))
    d = np.broadcast_to(np.asarray(direction, float).reshape(1, 3), (len(faces), 3))
    c, u, v, ok = _mt(o, d, tri[:, 0], tri[:, 1], tri[:, 2])
    if not ok.any():
        return None
    idx = np.flatnonzero(ok)
    best = idx[np.lexsort((idx, c[idx]))[0]]
    w = np.array([1.0 - u[best], u[best] - v[best], v[best]])
    return TriangleHit(int(best), float(c[best]), float(u[best]), float(v[best]), w @ tri[best])


def _closest(ray_idx, face_idx, c, u, v, n_rays):
    """Reduce candidate hits to the nearest per ray (ties go to the lower face id)."""
    order = np.lexsort((face_idx, c, ray_idx))
    ray_idx, face_idx, c, u, v = ray_idx[order], face_idx[order], c[order], u[order], v[order]
    first = np.ones(len(ray_idx), dtype=bool)
    first[1:] = ray_idx[1:] != ray_idx[:-1]
    return ray_idx[first], face_idx[first], c[first], u[first], v[first]


def _pack(rays: RaySet, verts, faces, ray_idx, face_idx, c, u, v) -> SimulatedScan:
    tri = verts[faces[face_idx]]
    w = np.stack([1.0 - u, u - v, v], axis=1)
    pts = np.einsum("hc,hcd->hd", w, tri)
    return SimulatedScan(pts, rays.lattice[ray_idx], face_idx, u, v, c)


def raycast_brute(rays: RaySet, mesh, chunk: int = 64) -> SimulatedScan:
    """O(rays x faces) reference caster."""
    verts, faces = _mesh_arrays(mesh)
    if len(rays) == 0 or len(faces) == 0:
        return SimulatedScan.empty()
    dirs = rays.directions()
    tri = verts[faces]
    nf = len(faces)
    hits = []
    for s in range(0, len(rays), chunk):
        d = dirs[s : s + chunk]
        nr = len(d)
        dd = np.repeat(d, nf, axis=0)
        o = np.broadcast_to(rays.sensor.origin, dd.shape)
        t = np.tile(tri, (nr, 1, 1))
        c, u, v, ok = _mt(o, dd, t[:, 0], t[:, 1], t[:, 2])
        ri = np.repeat(np.arange(s, s + nr), nf)[ok]
        fi = np.tile(np.arange(nf), nr)[ok]
        hits.append((ri, fi, c[ok], u[ok], v[ok]))
    ri, fi, c, u, v = (np.concatenate(x) for x in zip(*hits))
    return _pack(rays, verts, faces, *_closest(ri, fi, c, u, v, len(rays)))


def _candidate_pairs(origin, dirs, tri):
    """Ray/face pairs whose central projections can overlap.

    Rays and triangles are projected onto the plane orthogonal to the mean
    ray direction (a gnomonic projection maps triangles to triangles), so a
    ray can only hit a triangle whose projected bounding box contains it.
    Triangles reaching behind that plane are paired with every ray.
    """
    w = dirs.sum(axis=0)
    w = w / np.linalg.norm(w)
    if (dirs @ w).min() < 0.2:
        return None
    a = np.cross(w, [0.0, 0.0, 1.0] if abs(w[2]) < 0.9 else [1.0, 0.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(w, a)
    dw = dirs @ w
    gx, gy = (dirs @ a) / dw, (dirs @ b) / dw
    rel = tri - origin
    depth = rel @ w
    front = depth.min(axis=1) > 1e-6
    fidx = np.flatnonzero(front)
    dz = depth[front]
    tx = (rel[front] @ a) / dz
    ty = (rel[front] @ b) / dz
    pad = 1e-9
    lo_x, hi_x = tx.min(axis=1) - pad, tx.max(axis=1) + pad
    lo_y, hi_y = ty.min(axis=1) - pad, ty.max(axis=1) + pad
    order = np.argsort(gx, kind="stable")
    gxs = gx[order]
    start = np.searchsorted(gxs, lo_x, side="left")
    stop = np.searchsorted(gxs, hi_x, side="right")
    counts = stop - start
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(fidx)), counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    ray = order[np.repeat(start, counts) + offs]
    keep = (gy[ray] >= lo_y[owner]) & (gy[ray] <= hi_y[owner])
    ray, face = ray[keep], fidx[owner[keep]]
    back = np.flatnonzero(~front)
    if len(back):
        nr = len(dirs)
        ray = np.concatenate([ray, np.tile(np.arange(nr), len(back))])
        face = np.concatenate([face, np.repeat(back, nr)])
    return ray, face


def raycast_mesh(rays: RaySet, mesh) -> SimulatedScan:
    """Closest-hit cast of every ray; rays that miss produce no point."""
    verts, faces = _mesh_arrays(mesh)
    if len(rays) == 0 or len(faces) == 0:
        return SimulatedScan.empty()
    dirs = rays.directions()
    tri = verts[faces]
    pairs = _candidate_pairs(rays.sensor.origin, dirs, tri)
    if pairs is None:
        return raycast_brute(rays, (verts, faces))
    ray, face = pairs
    t = tri[face]
    o = np.broadcast_to(rays.sensor.origin, (len(ray), 3))
    c, u, v, ok = _mt(o, dirs[ray], t[:, 0], t[:, 1], t[:, 2])
    return _pack(rays, verts, faces, *_closest(ray[ok], face[ok], c[ok], u[ok], v[ok], len(rays)))
