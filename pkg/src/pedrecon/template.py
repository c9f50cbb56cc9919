"""Procedural low-poly humanoid template.

The body is built from closed tube meshes (torso, neck, head, limb segments,
feet) around a 17-joint skeleton in a slight A-pose. The frame is z-up, the
body faces +x and its left side is +y. Skinning weights are diffused from
bone segments by inverse distance and renormalized per vertex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body_model import SkeletonTemplate, TemplateError

JOINT_NAMES = (
    "pelvis",
    "spine1",
    "spine2",
    "neck",
    "head",
    "hip_l",
    "knee_l",
    "ankle_l",
    "hip_r",
    "knee_r",
    "ankle_r",
    "shoulder_l",
    "elbow_l",
    "wrist_l",
    "shoulder_r",
    "elbow_r",
    "wrist_r",
)
PARENTS = (-1, 0, 1, 2, 3, 0, 5, 6, 0, 8, 9, 2, 11, 12, 2, 14, 15)
SYMMETRY_CLASSES = (
    (0,),
    (1,),
    (2,),
    (3, 4),
    (5, 8),
    (6, 7, 9, 10),
    (11, 14),
    (12, 13, 15, 16),
)
MIRROR_PAIRS = ((5, 8), (6, 9), (7, 10), (11, 14), (12, 15), (13, 16))


@dataclass(frozen=True)
class HumanoidConfig:
    """Body dimensions in meters and mesh resolution.

    ``resolution`` multiplies the number of rings and segments of every
    part; 1.0 gives roughly 1.5k vertices.
    """

    pelvis_height: float = 0.95
    torso_length: float = 0.53
    neck_length: float = 0.10
    head_radius: float = 0.105
    hip_width: float = 0.18
    thigh_length: float = 0.42
    shin_length: float = 0.42
    foot_length: float = 0.22
    shoulder_width: float = 0.38
    upper_arm_length: float = 0.29
    forearm_length: float = 0.26
    hand_length: float = 0.16
    arm_spread: float = 0.30
    torso_radius: tuple[float, float] = (0.11, 0.165)
    limb_radius: float = 0.07
    resolution: float = 1.0

    def validate(self) -> None:
        for name, value in self.__dict__.items():
            vals = value if isinstance(value, tuple) else (value,)
            if any(not np.isfinite(v) or v <= 0 for v in vals):
                raise TemplateError(f"humanoid dimension {name} must be positive, got {value}")


def skeleton_joints(cfg: HumanoidConfig) -> np.ndarray:
    z0 = cfg.pelvis_height
    hw = cfg.hip_width / 2.0
    sw = cfg.shoulder_width / 2.0
    j = np.zeros((17, 3))
    j[0] = (0.0, 0.0, z0)
    j[1] = (0.0, 0.0, z0 + 0.28 * cfg.torso_length)
    j[2] = (0.0, 0.0, z0 + 0.62 * cfg.torso_length)
    j[3] = (0.0, 0.0, z0 + cfg.torso_length)
    j[4] = (0.0, 0.0, z0 + cfg.torso_length + cfg.neck_length)
    down = np.array([0.0, 0.0, -1.0])
    arm_dir = np.array([0.0, np.sin(cfg.arm_spread), -np.cos(cfg.arm_spread)])
    for side, sign in ((5, 1.0), (8, -1.0)):
        j[side] = (0.0, sign * hw, z0 - 0.04)
        j[side + 1] = j[side] + cfg.thigh_length * down
        j[side + 2] = j[side + 1] + cfg.shin_length * down
    for side, sign in ((11, 1.0), (14, -1.0)):
        d = arm_dir * np.array([1.0, sign, 1.0])
        j[side] = (0.0, sign * sw, z0 + 0.9 * cfg.torso_length)
        j[side + 1] = j[side] + cfg.upper_arm_length * d
        j[side + 2] = j[side + 1] + cfg.forearm_length * d
    return j


def _frame(axis: np.ndarray, hint: np.ndarray):
    a = axis / np.linalg.norm(axis)
    u = hint - (hint @ a) * a
    if np.linalg.norm(u) < 1e-8:
        u = np.cross(a, [1.0, 0.0, 0.0])
    u = u / np.linalg.norm(u)
    return a, u, np.cross(a, u)


def _tube(start, end, radii, n_rings: int, n_around: int, hint=(1.0, 0.0, 0.0), cap: float = 0.6):
    """Closed tube from ``start`` to ``end`` with rounded caps.

    ``radii`` is a callable mapping the axial fraction in [0, 1] to an
    (ru, rv) pair of half-axes along the hint direction and its normal.
    Returns ``(vertices, faces, axial_fraction)``.
    """
    start = np.asarray(start, float)
    end = np.asarray(end, float)
    a, u, v = _frame(end - start, np.asarray(hint, float))
    length = np.linalg.norm(end - start)
    phi = 2.0 * np.pi * np.arange(n_around) / n_around
    rings = []
    fracs = []
    # cap rings shrink as a quarter ellipse beyond both ends
    n_cap = 2
    cap_angles = np.linspace(0.0, np.pi / 2, n_cap + 2)[1:-1]
    r0 = radii(0.0)
    r1 = radii(1.0)
    for ang in cap_angles[::-1]:
        f = -np.sin(ang) * cap * min(r0) / length
        rings.append((f, np.cos(ang) * np.array(r0)))
    for f in np.linspace(0.0, 1.0, n_rings):
        rings.append((f, np.array(radii(f))))
    for ang in cap_angles:
        f = 1.0 + np.sin(ang) * cap * min(r1) / length
        rings.append((f, np.cos(ang) * np.array(r1)))
    verts = []
    for f, (ru, rv) in rings:
        center = start + f * length * a
        ring = center + ru * np.cos(phi)[:, None] * u + rv * np.sin(phi)[:, None] * v
        verts.append(ring)
        fracs.extend([f] * n_around)
    verts = np.concatenate(verts)
    bottom = start - cap * min(r0) * a
    top = end + cap * min(r1) * a
    verts = np.vstack([verts, bottom, top])
    fracs = np.array(fracs + [-cap * min(r0) / length, 1.0 + cap * min(r1) / length])
    n_ring = len(rings)
    faces = []
    for r in range(n_ring - 1):
        for i in range(n_around):
            a0 = r * n_around + i
            a1 = r * n_around + (i + 1) % n_around
            b0 = a0 + n_around
            b1 = a1 + n_around
            faces.append((a0, a1, b1))
            faces.append((a0, b1, b0))
    ib = n_ring * n_around
    it = ib + 1
    last = (n_ring - 1) * n_around
    for i in range(n_around):
        faces.append((ib, (i + 1) % n_around, i))
        faces.append((it, last + i, last + (i + 1) % n_around))
    return verts, np.array(faces, dtype=np.int64), fracs


def _ellipsoid(center, radii, n_lat: int, n_lon: int):
    center = np.asarray(center, float)
    lat = np.linspace(0.0, np.pi, n_lat + 2)[1:-1]
    lon = 2.0 * np.pi * np.arange(n_lon) / n_lon
    verts = []
    for t in lat:
        ring = np.stack(
            [np.sin(t) * np.cos(lon) * radii[0], np.sin(t) * np.sin(lon) * radii[1], np.full(n_lon, np.cos(t) * radii[2])],
            axis=1,
        )
        verts.append(center + ring)
    verts = np.concatenate(verts)
    top = center + np.array([0.0, 0.0, radii[2]])
    bottom = center - np.array([0.0, 0.0, radii[2]])
    verts = np.vstack([verts, top, bottom])
    faces = []
    for r in range(n_lat - 1):
        for i in range(n_lon):
            a0 = r * n_lon + i
            a1 = r * n_lon + (i + 1) % n_lon
            b0, b1 = a0 + n_lon, a1 + n_lon
            faces.append((a0, b1, a1))
            faces.append((a0, b0, b1))
    it, ib = n_lat * n_lon, n_lat * n_lon + 1
    last = (n_lat - 1) * n_lon
    for i in range(n_lon):
        faces.append((it, i, (i + 1) % n_lon))
        faces.append((ib, last + (i + 1) % n_lon, last + i))
    return verts, np.array(faces, dtype=np.int64)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals, unit length."""
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(n, faces[:, c], fn)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def make_template(config: HumanoidConfig | None = None) -> SkeletonTemplate:
    """Build the default 17-joint humanoid."""
    cfg = config or HumanoidConfig()
    cfg.validate()
    j = skeleton_joints(cfg)
    res = cfg.resolution

    def n(x, lo=3):
        return max(lo, int(round(x * res)))

    up = np.array([0.0, 0.0, 1.0])
    arm_dir_l = (j[12] - j[11]) / np.linalg.norm(j[12] - j[11])
    arm_dir_r = (j[15] - j[14]) / np.linalg.norm(j[15] - j[14])
    hand_l = j[13] + cfg.hand_length * arm_dir_l
    hand_r = j[16] + cfg.hand_length * arm_dir_r
    toe = np.array([0.75 * cfg.foot_length, 0.0, -0.05])
    heel = np.array([-0.25 * cfg.foot_length, 0.0, -0.05])
    lr = cfg.limb_radius
    tr = cfg.torso_radius

    def torso_r(f):
        # hips -> waist -> chest -> shoulders
        w = np.interp(f, [0.0, 0.3, 0.65, 0.9, 1.0], [1.0, 0.82, 1.0, 0.95, 0.45])
        return (tr[0] * w, tr[1] * w)

    head_c = j[4] + np.array([0.01, 0.0, 0.7 * cfg.head_radius])
    # (start, end, radius function, rings, around, bone joint, candidate joints, hint)
    parts = [
        ("torso", j[0] - 0.12 * up, j[3], torso_r, n(14), n(18), (0, 1, 2, 3), (1.0, 0.0, 0.0)),
        ("neck", j[3] - 0.02 * up, j[4] + 0.02 * up, lambda f: (0.05, 0.055), n(3), n(12), (2, 3, 4), (1.0, 0.0, 0.0)),
        ("upper_arm_l", j[11], j[12], lambda f: (0.55 * lr * (1 - 0.2 * f),) * 2, n(7), n(10), (2, 11, 12), (1.0, 0.0, 0.0)),
        ("forearm_l", j[12], hand_l, lambda f: (0.45 * lr * (1 - 0.3 * f), 0.45 * lr * (1 - 0.1 * f)), n(9), n(10), (11, 12, 13), (1.0, 0.0, 0.0)),
        ("upper_arm_r", j[14], j[15], lambda f: (0.55 * lr * (1 - 0.2 * f),) * 2, n(7), n(10), (2, 14, 15), (1.0, 0.0, 0.0)),
        ("forearm_r", j[15], hand_r, lambda f: (0.45 * lr * (1 - 0.3 * f), 0.45 * lr * (1 - 0.1 * f)), n(9), n(10), (14, 15, 16), (1.0, 0.0, 0.0)),
        ("thigh_l", j[5] + 0.05 * up, j[6], lambda f: (lr * (1.1 - 0.35 * f),) * 2, n(9), n(12), (0, 5, 6), (1.0, 0.0, 0.0)),
        ("shin_l", j[6], j[7], lambda f: (lr * (0.75 - 0.25 * f),) * 2, n(9), n(12), (5, 6, 7), (1.0, 0.0, 0.0)),
        ("foot_l", j[7] + heel, j[7] + toe, lambda f: (0.045, 0.04), n(5), n(8), (6, 7), (0.0, 0.0, 1.0)),
        ("thigh_r", j[8] + 0.05 * up, j[9], lambda f: (lr * (1.1 - 0.35 * f),) * 2, n(9), n(12), (0, 8, 9), (1.0, 0.0, 0.0)),
        ("shin_r", j[9], j[10], lambda f: (lr * (0.75 - 0.25 * f),) * 2, n(9), n(12), (8, 9, 10), (1.0, 0.0, 0.0)),
        ("foot_r", j[10] + heel, j[10] + toe, lambda f: (0.045, 0.04), n(5), n(8), (9, 10), (0.0, 0.0, 1.0)),
    ]
    verts, faces, cands = [], [], []
    offset = 0
    for _, a, b, rad, rings, around, cand, hint in parts:
        v, f, _ = _tube(a, b, rad, rings, around, hint=hint)
        verts.append(v)
        faces.append(f + offset)
        cands.extend([cand] * len(v))
        offset += len(v)
    hv, hf = _ellipsoid(head_c, (1.0 * cfg.head_radius, 0.85 * cfg.head_radius, 1.1 * cfg.head_radius), n(9), n(14))
    verts.append(hv)
    faces.append(hf + offset)
    cands.extend([(3, 4)] * len(hv))
    verts = np.concatenate(verts)
    faces = np.concatenate(faces)
    faces = _orient_outward(verts, faces)

    # one bone segment per joint: towards its main child, or an end point
    ends = {0: j[1], 1: j[2], 2: j[3], 3: j[4], 4: head_c + np.array([0.0, 0.0, cfg.head_radius]),
            5: j[6], 6: j[7], 7: j[7] + toe, 8: j[9], 9: j[10], 10: j[10] + toe,
            11: j[12], 12: j[13], 13: hand_l, 14: j[15], 15: j[16], 16: hand_r}
    dist = np.stack([_segment_distance(verts, j[k], ends[k]) for k in range(17)], axis=1)
    mask = np.zeros_like(dist, dtype=bool)
    for i, c in enumerate(cands):
        mask[i, list(c)] = True
    w = np.where(mask, 1.0 / (dist + 1e-3) ** 4, 0.0)
    # keep the three strongest influences
    thresh = -np.sort(-w, axis=1)[:, 2:3]
    w = np.where(w >= thresh, w, 0.0)
    w = w / w.sum(axis=1, keepdims=True)
    w[w < 1e-4] = 0.0
    w = w / w.sum(axis=1, keepdims=True)

    return SkeletonTemplate(
        vertices=verts,
        normals=vertex_normals(verts, faces),
        faces=faces,
        blend_weights=w,
        joints=j,
        parents=np.array(PARENTS),
        symmetry_classes=SYMMETRY_CLASSES,
        joint_names=JOINT_NAMES,
    )


def _orient_outward(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Flip each connected component so its signed volume is positive."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    nv = len(verts)
    rows = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    cols = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
    _, label = connected_components(adj, directed=False)
    tri = verts[faces]
    vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))
    comp = label[faces[:, 0]]
    signed = np.bincount(comp, weights=vol)
    out = faces.copy()
    flip = signed[comp] < 0
    out[flip] = out[flip][:, [0, 2, 1]]
    return out
