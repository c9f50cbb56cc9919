"""Versioned JSON artifacts.

Every file is a JSON object with ``format`` and ``version`` keys plus the
fields of its kind. Keys are sorted and floats are written with Python's
shortest round-trip representation, so ``parse(serialize(x))`` reproduces
every double exactly and re-serialization is byte-stable. Readers reject
unknown versions, unknown fields and missing fields, naming the field path.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body_model import ShapeParams, SkeletonTemplate
from .energy import Camera, EnergyWeights, FrameObservation, Joints2D
from .fitter import FitConfig, FitResult, StageTrace
from .gmm import GmmPrior
from .optim import ParamBlock
from .raycaster import BoundingBox, LidarScan, SensorModel
from .retarget import AssetSequence, QueryTrajectory

VERSION = 1


class FormatError(ValueError):
    """Malformed artifact; the message names the offending field or line."""


# --- canonical text ---------------------------------------------------------


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        if not math.isfinite(v):
            raise FormatError("non-finite number cannot be serialized")
        return v
    return x


def dumps(kind: str, body: dict) -> str:
    doc = {"format": kind, "version": VERSION, **body}
    return json.dumps(_plain(doc), sort_keys=True, indent=1, allow_nan=False) + "\n"


def loads(text: str, kind: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise FormatError("top level must be an object")
    if doc.get("format") != kind:
        raise FormatError(f"field 'format': expected {kind!r}, found {doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise FormatError(f"field 'version': unsupported version {doc.get('version')!r} (expected {VERSION})")
    return {k: v for k, v in doc.items() if k not in ("format", "version")}


def write(path, kind: str, body: dict) -> str:
    text = dumps(kind, body)
    Path(path).write_text(text)
    return text


def read(path, kind: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from None
    try:
        return loads(text, kind)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def _fields(obj, path: str, required, optional=()):
    if not isinstance(obj, dict):
        raise FormatError(f"field '{path}' must be an object")
    for key in obj:
        if key not in required and key not in optional:
            raise FormatError(f"unknown field '{_join(path, key)}'")
    for key in required:
        if key not in obj:
            raise FormatError(f"missing field '{_join(path, key)}'")
    return obj


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _array(obj, path, shape=None, dtype=float):
    try:
        arr = np.array(obj, dtype=dtype)
    except (TypeError, ValueError):
        raise FormatError(f"field '{path}' is not a numeric array") from None
    if shape is not None:
        if arr.size == 0 and len(shape) > 1:
            arr = arr.reshape((0,) + tuple(s for s in shape[1:]))
        if arr.ndim != len(shape) or any(s is not None and a != s for a, s in zip(arr.shape, shape)):
            raise FormatError(f"field '{path}' has shape {arr.shape}, expected {shape}")
    if dtype is float and not np.all(np.isfinite(arr)):
        raise FormatError(f"field '{path}' contains non-finite values")
    return arr


def _num(obj, path):
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise FormatError(f"field '{path}' must be a number")
    return float(obj)


def _wrap(fn, *args):
    """Turn validation errors raised by constructors into FormatErrors."""
    try:
        return fn(*args)
    except FormatError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(str(exc)) from None


# --- template ---------------------------------------------------------------


def template_body(t: SkeletonTemplate) -> dict:
    w = np.asarray(t.blend_weights)
    vi, ji = np.nonzero(w)
    return {
        "vertices": t.vertices,
        "normals": t.normals,
        "faces": t.faces,
        "weights": [[int(a), int(b), float(w[a, b])] for a, b in zip(vi, ji)],
        "joints": [{"name": n, "position": p} for n, p in zip(t.joint_names, t.joints)],
        "parents": [None if p < 0 else int(p) for p in t.parents],
        "symmetry_classes": [list(c) for c in t.symmetry_classes],
    }


def template_from_body(b: dict, path: str = "") -> SkeletonTemplate:
    _fields(b, path, ("vertices", "normals", "faces", "weights", "joints", "parents", "symmetry_classes"))
    verts = _array(b["vertices"], _join(path, "vertices"), (None, 3))
    normals = _array(b["normals"], _join(path, "normals"), (len(verts), 3))
    faces = _array(b["faces"], _join(path, "faces"), (None, 3), np.int64)
    names, joints = [], []
    for i, j in enumerate(b["joints"]):
        _fields(j, f"{_join(path, 'joints')}[{i}]", ("name", "position"))
        names.append(str(j["name"]))
        joints.append(_array(j["position"], f"{_join(path, 'joints')}[{i}].position", (3,)))
    k = len(joints)
    weights = np.zeros((len(verts), k))
    for i, triple in enumerate(b["weights"]):
        if not isinstance(triple, list) or len(triple) != 3:
            raise FormatError(f"field '{_join(path, 'weights')}[{i}]' must be a (vertex, joint, weight) triple")
        v, j, w = triple
        if not (isinstance(v, int) and isinstance(j, int) and 0 <= v < len(verts) and 0 <= j < k):
            raise FormatError(f"field '{_join(path, 'weights')}[{i}]' references an invalid vertex or joint")
        weights[v, j] = _num(w, f"{_join(path, 'weights')}[{i}][2]")
    parents = [-1 if p is None else p for p in b["parents"]]
    if len(parents) != k or not all(isinstance(p, int) for p in parents):
        raise FormatError(f"field '{_join(path, 'parents')}' must list one integer or null per joint")
    classes = tuple(tuple(int(x) for x in c) for c in b["symmetry_classes"])
    return _wrap(
        lambda: SkeletonTemplate(
            vertices=verts,
            normals=normals,
            faces=faces,
            blend_weights=weights,
            joints=np.array(joints),
            parents=tuple(parents),
            symmetry_classes=classes,
            joint_names=tuple(names),
        )
    )


def save_template(path, t: SkeletonTemplate) -> str:
    return write(path, "template", template_body(t))


def load_template(path) -> SkeletonTemplate:
    return template_from_body(read(path, "template"))


# --- sensor, scans, observations --------------------------------------------


def sensor_body(s: SensorModel) -> dict:
    return {"origin": s.origin, "d_phi": s.d_phi, "d_theta": s.d_theta, "rotation": s.rotation}


def sensor_from_body(b, path="sensor") -> SensorModel:
    _fields(b, path, ("origin", "d_phi", "d_theta"), ("rotation",))
    rot = _array(b["rotation"], _join(path, "rotation"), (3, 3)) if "rotation" in b else np.eye(3)
    return _wrap(
        SensorModel,
        _array(b["origin"], _join(path, "origin"), (3,)),
        _num(b["d_phi"], _join(path, "d_phi")),
        _num(b["d_theta"], _join(path, "d_theta")),
        rot,
    )


def bbox_body(b: BoundingBox) -> dict:
    return {"center": b.center, "half_extents": b.half_extents, "rotation": b.rotation}


def bbox_from_body(b, path="bbox") -> BoundingBox:
    _fields(b, path, ("center", "half_extents"), ("rotation",))
    rot = _array(b["rotation"], _join(path, "rotation"), (3, 3)) if "rotation" in b else np.eye(3)
    return _wrap(
        BoundingBox,
        _array(b["center"], _join(path, "center"), (3,)),
        _array(b["half_extents"], _join(path, "half_extents"), (3,)),
        rot,
    )


def scan_body(s: LidarScan) -> dict:
    return {
        "sensor": sensor_body(s.sensor),
        "target_points": s.target_points,
        "obstacle_points": s.obstacle_points,
        "bbox": bbox_body(s.bbox),
    }


def scan_from_body(b, path="") -> LidarScan:
    _fields(b, path, ("sensor", "target_points", "obstacle_points", "bbox"))
    return _wrap(
        LidarScan,
        _array(b["target_points"], _join(path, "target_points"), (None, 3)),
        _array(b["obstacle_points"], _join(path, "obstacle_points"), (None, 3)),
        bbox_from_body(b["bbox"], _join(path, "bbox")),
        sensor_from_body(b["sensor"], _join(path, "sensor")),
    )


def joints2d_body(j: Joints2D) -> list:
    return [{"name": n, "u": p[0], "v": p[1], "confidence": c} for n, p, c in zip(j.names, j.pixels, j.confidence)]


def joints2d_from_body(b, path="joints2d") -> Joints2D:
    if not isinstance(b, list):
        raise FormatError(f"field '{path}' must be a list")
    names, pix, conf = [], [], []
    for i, e in enumerate(b):
        p = f"{path}[{i}]"
        _fields(e, p, ("name", "u", "v", "confidence"))
        names.append(str(e["name"]))
        pix.append((_num(e["u"], p + ".u"), _num(e["v"], p + ".v")))
        conf.append(_num(e["confidence"], p + ".confidence"))
    return _wrap(Joints2D, tuple(names), np.array(pix).reshape(-1, 2), np.array(conf))


def camera_body(c: Camera) -> dict:
    return {"projection": c.projection, "image_size": list(c.image_size)}


def camera_from_body(b, path="camera") -> Camera:
    _fields(b, path, ("projection", "image_size"))
    size = _array(b["image_size"], _join(path, "image_size"), (2,), np.int64)
    return _wrap(Camera, _array(b["projection"], _join(path, "projection"), (3, 4)), tuple(size))


def observations_body(obs) -> dict:
    return {
        "frames": [
            {
                "timestamp": o.timestamp,
                "scan": scan_body(o.scan),
                "joints2d": joints2d_body(o.joints2d),
                "camera": camera_body(o.camera),
            }
            for o in obs
        ]
    }


def observations_from_body(b) -> list[FrameObservation]:
    _fields(b, "", ("frames",))
    out = []
    for t, f in enumerate(b["frames"]):
        p = f"frames[{t}]"
        _fields(f, p, ("timestamp", "scan", "joints2d", "camera"))
        out.append(
            FrameObservation(
                scan_from_body(f["scan"], p + ".scan"),
                joints2d_from_body(f["joints2d"], p + ".joints2d"),
                camera_from_body(f["camera"], p + ".camera"),
                _num(f["timestamp"], p + ".timestamp"),
            )
        )
    return out


def save_observations(path, obs) -> str:
    return write(path, "observations", observations_body(obs))


def load_observations(path) -> list[FrameObservation]:
    return observations_from_body(read(path, "observations"))


# --- GMM prior --------------------------------------------------------------


def save_gmm(path, g: GmmPrior) -> str:
    return write(
        path,
        "gmm",
        {"weights": g.weights, "means": g.means, "cholesky": g.chol, "dimension": g.dim, "components": g.n_components},
    )


def load_gmm(path) -> GmmPrior:
    b = _fields(read(path, "gmm"), "", ("weights", "means", "cholesky", "dimension", "components"))
    r, d = int(b["components"]), int(b["dimension"])
    return _wrap(
        GmmPrior,
        _array(b["weights"], "weights", (r,)),
        _array(b["means"], "means", (r, d)),
        _array(b["cholesky"], "cholesky", (r, d, d)),
    )


# --- fitting ----------------------------------------------------------------

_WEIGHT_KEYS = ("sim", "joint", "pose", "bone", "l2", "lap", "sigma")
_CONFIG_KEYS = (
    "weights",
    "pose_iters",
    "shape_iters",
    "warmup_iters",
    "tolerance",
    "patience",
    "yaws",
    "lr",
    "shape_lr",
    "beta1",
    "beta2",
    "eps",
    "laplacian",
    "prior_starts",
    "reject_uphill",
    "seed",
)


def fit_config_body(c: FitConfig) -> dict:
    out = {k: getattr(c, k) for k in _CONFIG_KEYS if k != "weights"}
    out["yaws"] = list(c.yaws)
    out["weights"] = {k: getattr(c.weights, k) for k in _WEIGHT_KEYS}
    return out


def fit_config_from_body(b, path="") -> FitConfig:
    """Every field is optional; missing ones take their defaults."""
    _fields(b, path, (), _CONFIG_KEYS)
    kw = {k: v for k, v in b.items() if k != "weights"}
    if "yaws" in kw:
        kw["yaws"] = tuple(_num(y, _join(path, "yaws")) for y in kw["yaws"])
    if "weights" in b:
        _fields(b["weights"], _join(path, "weights"), (), _WEIGHT_KEYS)
        kw["weights"] = _wrap(lambda: EnergyWeights(**{k: float(v) for k, v in b["weights"].items()}))
    return _wrap(lambda: FitConfig(**kw))


def save_fit_config(path, c: FitConfig) -> str:
    return write(path, "fit_config", fit_config_body(c))


def load_fit_config(path) -> FitConfig:
    return fit_config_from_body(read(path, "fit_config"))


def params_body(p: ParamBlock) -> dict:
    return {"rotations": p.rotations, "offsets": p.offsets, "scales": p.scales, "displacements": p.displacements}


def params_from_body(b, path="params") -> ParamBlock:
    _fields(b, path, ("rotations", "offsets", "scales", "displacements"))
    return _wrap(
        ParamBlock,
        _array(b["rotations"], _join(path, "rotations"), (None, None, 3)),
        _array(b["offsets"], _join(path, "offsets"), (None, 3)),
        _array(b["scales"], _join(path, "scales"), (None,)),
        _array(b["displacements"], _join(path, "displacements"), (None,)),
    )


def _trace_body(t: StageTrace) -> dict:
    return {"energies": t.energies, "best": t.best, "converged": t.converged}


def fit_result_body(r: FitResult, metrics: dict | None = None) -> dict:
    body = {
        "params": params_body(r.params),
        "yaw": r.yaw,
        "traces": {k: _trace_body(v) for k, v in r.traces.items()},
        "warmup": [[y, e] for y, e in r.warmup.items()],
        "breakdown": r.breakdown,
        "initial_energy": r.initial_energy,
        "final_energy": r.final_energy,
    }
    if metrics is not None:
        body["metrics"] = metrics
    return body


def fit_result_from_body(b) -> tuple[FitResult, dict | None]:
    _fields(b, "", ("params", "yaw", "traces", "warmup", "breakdown", "initial_energy", "final_energy"), ("metrics",))
    traces = {}
    for k, t in b["traces"].items():
        _fields(t, f"traces.{k}", ("energies", "best", "converged"))
        traces[k] = StageTrace([float(e) for e in t["energies"]], [float(e) for e in t["best"]], bool(t["converged"]))
    result = FitResult(
        params=params_from_body(b["params"]),
        yaw=_num(b["yaw"], "yaw"),
        traces=traces,
        warmup={float(y): float(e) for y, e in b["warmup"]},
        breakdown={str(k): float(v) for k, v in b["breakdown"].items()},
        initial_energy=_num(b["initial_energy"], "initial_energy"),
        final_energy=_num(b["final_energy"], "final_energy"),
    )
    return result, b.get("metrics")


def save_fit_result(path, r: FitResult, metrics: dict | None = None) -> str:
    return write(path, "fit_result", fit_result_body(r, metrics))


def load_fit_result(path) -> FitResult:
    return fit_result_from_body(read(path, "fit_result"))[0]


def save_truth(path, params: ParamBlock, heading: float) -> str:
    return write(path, "ground_truth", {"params": params_body(params), "heading": heading})


def load_truth(path) -> tuple[ParamBlock, float]:
    b = _fields(read(path, "ground_truth"), "", ("params", "heading"))
    return params_from_body(b["params"]), _num(b["heading"], "heading")


# --- assets, queries, scenarios ---------------------------------------------


def asset_body(a: AssetSequence) -> dict:
    speeds = a.speeds
    meta = dict(a.metadata)
    meta["speed_mean"] = float(speeds.mean())
    meta["speed_max"] = float(speeds.max())
    return {
        "asset_id": a.asset_id,
        "template_ref": a.template_ref,
        "shape": {"bone_scales": a.shape.bone_scales, "displacements": a.shape.displacements},
        "timestamps": a.timestamps,
        "rotations": a.rotations,
        "offsets": a.offsets,
        "bev": a.bev,
        "speeds": speeds,
        "cyclic": a.cyclic,
        "metadata": meta,
    }


def asset_from_body(b, path="") -> AssetSequence:
    keys = ("asset_id", "template_ref", "shape", "timestamps", "rotations", "offsets", "bev", "speeds", "cyclic", "metadata")
    _fields(b, path, keys)
    _fields(b["shape"], _join(path, "shape"), ("bone_scales", "displacements"))
    shape = _wrap(
        ShapeParams,
        _array(b["shape"]["bone_scales"], _join(path, "shape.bone_scales"), (None,)),
        _array(b["shape"]["displacements"], _join(path, "shape.displacements"), (None,)),
    )
    asset = _wrap(
        AssetSequence,
        str(b["asset_id"]),
        shape,
        _array(b["rotations"], _join(path, "rotations"), (None, None, 3)),
        _array(b["offsets"], _join(path, "offsets"), (None, 3)),
        _array(b["timestamps"], _join(path, "timestamps"), (None,)),
        bool(b["cyclic"]),
        str(b["template_ref"]),
        dict(b["metadata"]),
    )
    bev = _array(b["bev"], _join(path, "bev"), (len(asset.timestamps), 2))
    speeds = _array(b["speeds"], _join(path, "speeds"), (len(asset.timestamps) - 1,))
    if not np.allclose(bev, asset.bev, rtol=0, atol=1e-6):
        raise FormatError(f"field '{_join(path, 'bev')}' disagrees with the root offsets")
    if not np.allclose(speeds, asset.speeds, rtol=0, atol=1e-6):
        raise FormatError(f"field '{_join(path, 'speeds')}' disagrees with the BEV track")
    asset.metadata.pop("speed_mean", None)
    asset.metadata.pop("speed_max", None)
    return asset


def save_asset(path, a: AssetSequence) -> str:
    return write(path, "asset", asset_body(a))


def load_asset(path) -> AssetSequence:
    return asset_from_body(read(path, "asset"))


def load_bank(directory):
    from .retarget import AssetBank

    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d}: asset bank directory not found")
    # run manifests may sit alongside the assets
    return AssetBank([load_asset(p) for p in sorted(d.glob("*.json")) if not p.name.endswith(".manifest.json")])


def query_body(q: QueryTrajectory) -> dict:
    return {"timestamps": q.timestamps, "waypoints": q.waypoints}


def query_from_body(b, path="") -> QueryTrajectory:
    _fields(b, path, ("timestamps", "waypoints"))
    return _wrap(
        QueryTrajectory,
        _array(b["timestamps"], _join(path, "timestamps"), (None,)),
        _array(b["waypoints"], _join(path, "waypoints"), (None, 2)),
    )


def save_query(path, q: QueryTrajectory) -> str:
    return write(path, "query", query_body(q))


def load_query(path) -> QueryTrajectory:
    return query_from_body(read(path, "query"))


@dataclass(frozen=True)
class ActorSpec:
    name: str
    query: QueryTrajectory
    asset: str | None = None  # None: retrieve by speed


@dataclass(frozen=True)
class ObstacleSpec:
    name: str
    vertices: np.ndarray
    faces: np.ndarray


@dataclass(frozen=True)
class ScenarioScript:
    sensor: SensorModel
    sweep_times: tuple
    actors: tuple
    obstacles: tuple = ()
    labels: bool = True


def scenario_body(s: ScenarioScript) -> dict:
    return {
        "sensor": sensor_body(s.sensor),
        "sweep_times": list(s.sweep_times),
        "actors": [
            {"name": a.name, "query": query_body(a.query), **({"asset": a.asset} if a.asset is not None else {})}
            for a in s.actors
        ],
        "obstacles": [{"name": o.name, "vertices": o.vertices, "faces": o.faces} for o in s.obstacles],
        "output": {"labels": s.labels},
    }


def scenario_from_body(b) -> ScenarioScript:
    _fields(b, "", ("sensor", "sweep_times", "actors"), ("obstacles", "output"))
    actors = []
    for i, a in enumerate(b["actors"]):
        p = f"actors[{i}]"
        _fields(a, p, ("name", "query"), ("asset",))
        actors.append(ActorSpec(str(a["name"]), query_from_body(a["query"], p + ".query"), a.get("asset")))
    obstacles = []
    for i, o in enumerate(b.get("obstacles", [])):
        p = f"obstacles[{i}]"
        _fields(o, p, ("name", "vertices", "faces"))
        obstacles.append(
            ObstacleSpec(
                str(o["name"]),
                _array(o["vertices"], p + ".vertices", (None, 3)),
                _array(o["faces"], p + ".faces", (None, 3), np.int64),
            )
        )
    out = _fields(b.get("output", {}), "output", (), ("labels",))
    times = tuple(_num(t, "sweep_times") for t in b["sweep_times"])
    return ScenarioScript(sensor_from_body(b["sensor"]), times, tuple(actors), tuple(obstacles), bool(out.get("labels", True)))


def save_scenario(path, s: ScenarioScript) -> str:
    return write(path, "scenario", scenario_body(s))


def load_scenario(path) -> ScenarioScript:
    return scenario_from_body(read(path, "scenario"))


def sweep_body(sweep, sensor: SensorModel, actor_names, labels: bool = True) -> dict:
    scans = []
    for name, pts, box in zip(actor_names, sweep.actor_points, sweep.actor_bboxes):
        scans.append(
            {
                "actor": name,
                "scan": scan_body(LidarScan(pts, sweep.obstacle_points, box, sensor)),
            }
        )
    body = {"time": sweep.time, "sensor": sensor_body(sensor), "points": sweep.merged.points, "scans": scans}
    if labels:
        body["labels"] = sweep.labels
    return body


def load_sweep(path) -> dict:
    b = _fields(read(path, "sweep"), "", ("time", "sensor", "points", "scans"), ("labels",))
    out = {
        "time": _num(b["time"], "time"),
        "sensor": sensor_from_body(b["sensor"]),
        "points": _array(b["points"], "points", (None, 3)),
        "scans": {},
    }
    for i, s in enumerate(b["scans"]):
        _fields(s, f"scans[{i}]", ("actor", "scan"))
        out["scans"][str(s["actor"])] = scan_from_body(s["scan"], f"scans[{i}].scan")
    if "labels" in b:
        out["labels"] = _array(b["labels"], "labels", (len(out["points"]),), np.int64)
    return out


# --- run manifest -----------------------------------------------------------


def digest_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_digest: str
    inputs: dict
    outputs: dict
    seed: int | None
    version: str
    wall_clock: float
    started: float = field(default_factory=time.time)

    @classmethod
    def build(cls, command, config_text: str, inputs, outputs, seed, started: float) -> "RunManifest":
        from . import __version__

        return cls(
            command=command,
            config_digest=digest_text(config_text),
            inputs={str(p): digest_file(p) for p in inputs},
            outputs={str(p): digest_file(p) for p in outputs},
            seed=seed,
            version=__version__,
            wall_clock=time.time() - started,
            started=started,
        )

    def verify(self) -> list[str]:
        """Paths whose current digest no longer matches the stored one."""
        bad = []
        for p, d in {**self.inputs, **self.outputs}.items():
            if not os.path.exists(p) or digest_file(p) != d:
                bad.append(p)
        return bad


def save_manifest(path, m: RunManifest) -> str:
    body = dict(m.__dict__)
    # "version" is the artifact format version; the package version gets its own key
    body["package_version"] = body.pop("version")
    return write(path, "manifest", body)


def load_manifest(path) -> RunManifest:
    keys = ("command", "config_digest", "inputs", "outputs", "seed", "package_version", "wall_clock", "started")
    b = dict(_fields(read(path, "manifest"), "", keys))
    b["version"] = b.pop("package_version")
    return RunManifest(**b)


def save_trajectory(path, r) -> str:
    return write(
        path,
        "trajectory",
        {
            "asset_id": r.asset_id,
            "timestamps": r.timestamps,
            "rotations": r.rotations,
            "offsets": r.offsets,
            "phase": r.phase,
            "shape": {"bone_scales": r.shape.bone_scales, "displacements": r.shape.displacements},
        },
    )


def load_trajectory(path):
    from .retarget import RetargetedTrajectory

    b = _fields(read(path, "trajectory"), "", ("asset_id", "timestamps", "rotations", "offsets", "phase", "shape"))
    _fields(b["shape"], "shape", ("bone_scales", "displacements"))
    shape = _wrap(
        ShapeParams,
        _array(b["shape"]["bone_scales"], "shape.bone_scales", (None,)),
        _array(b["shape"]["displacements"], "shape.displacements", (None,)),
    )
    return RetargetedTrajectory(
        _array(b["timestamps"], "timestamps", (None,)),
        _array(b["rotations"], "rotations", (None, None, 3)),
        _array(b["offsets"], "offsets", (None, 3)),
        shape,
        str(b["asset_id"]),
        _array(b["phase"], "phase", (None,)),
    )


def save_humanoid_config(path, cfg) -> str:
    return write(path, "humanoid_config", dict(cfg.__dict__))


def load_humanoid_config(path):
    from .template import HumanoidConfig

    b = read(path, "humanoid_config")
    _fields(b, "", (), tuple(HumanoidConfig.__dataclass_fields__))
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in b.items()}
    return _wrap(lambda: HumanoidConfig(**kw))


def load_synth_config(path):
    from .simulate import SynthConfig

    b = read(path, "synth_config")
    _fields(b, "", (), tuple(SynthConfig.__dataclass_fields__))
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in b.items()}
    return _wrap(lambda: SynthConfig(**kw))


def save_synth_config(path, cfg) -> str:
    return write(path, "synth_config", dict(cfg.__dict__))
