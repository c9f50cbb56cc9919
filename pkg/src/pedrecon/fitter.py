"""Sequence reconstruction: initialization, yaw multi-start, two-stage Adam.

Stage one optimizes joint rotations, root offsets and bone scales; stage two
optimizes the per-vertex displacements. Both yaw branches (facing +x and
-x) first run a short stage-one warmup and the branch with the lower energy
is kept. Every iteration refreshes ray hits and nearest-neighbour pairings
before taking a gradient. The best iterate seen so far is what gets
returned, so the reported energy never exceeds the initial one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .body_model import ShapeParams, SkeletonTemplate, pose_sequence
from .energy import EnergyWeights, FrameObservation, LaplacianOperator, ObservationError, SequenceEnergy
from .gmm import GmmPrior
from .optim import STAGE_BLOCKS, AdamState, NonFiniteError, ParamBlock, adam_step, gradient

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    """Numerical failure during fitting; carries the last finite state."""

    def __init__(self, message, params: ParamBlock | None = None, stage: str | None = None, term=None):
        super().__init__(message)
        self.params = params
        self.stage = stage
        self.term = term


@dataclass(frozen=True)
class FitConfig:
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    pose_iters: int = 150
    shape_iters: int = 150
    warmup_iters: int = 10
    tolerance: float = 1e-4
    patience: int = 5
    yaws: tuple[float, ...] = (0.0, float(np.pi))
    lr: float = 1e-2
    shape_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    laplacian: str = "uniform"
    prior_starts: bool = True
    reject_uphill: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "yaws", tuple(float(y) for y in self.yaws))
        if min(self.pose_iters, self.shape_iters, self.patience) <= 0 or self.warmup_iters < 0:
            raise ValueError("iteration caps and patience must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if not self.yaws:
            raise ValueError("need at least one initial yaw")
        if self.lr <= 0 or self.shape_lr <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class StageTrace:
    energies: list = field(default_factory=list)  # energy of each visited iterate
    best: list = field(default_factory=list)  # best-so-far after each iterate
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.energies)


@dataclass
class FitResult:
    params: ParamBlock
    yaw: float
    traces: dict  # stage name -> StageTrace
    warmup: dict  # yaw -> best warmup energy
    breakdown: dict  # weighted terms at the returned parameters
    initial_energy: float
    final_energy: float

    @property
    def shape(self) -> ShapeParams:
        return ShapeParams(self.params.scales, self.params.displacements)


def validate_observations(observations, weights: EnergyWeights | None = None) -> None:
    if len(observations) == 0:
        raise ObservationError("empty observation sequence")
    times = [o.timestamp for o in observations]
    for t in range(1, len(times)):
        if not times[t] > times[t - 1]:
            raise ObservationError("timestamps must be strictly increasing", frame=t)
    for t, o in enumerate(observations):
        if len(o.scan.target_points) == 0:
            raise ObservationError("scan has no target points", frame=t)


def init_params(observations, template: SkeletonTemplate, gmm: GmmPrior, yaw: float) -> ParamBlock:
    """Prior-mean pose with the given root yaw, centroid root offsets, neutral shape."""
    if len(observations) == 0:
        raise ObservationError("empty observation sequence")
    rot = _mean_pose(template, gmm.top_mean)
    rot[template.root] = (0.0, 0.0, yaw)
    offsets = np.zeros((len(observations), 3))
    for t, o in enumerate(observations):
        if len(o.scan.target_points) == 0:
            raise ObservationError("scan has no target points", frame=t)
        offsets[t] = o.scan.target_points.mean(axis=0)
    # root offsets translate the rest pose, whose root joint is not at the origin
    offsets -= template.joints[template.root]
    rotations = np.repeat(rot[None], len(observations), axis=0)
    return ParamBlock(rotations, offsets, np.ones(template.n_classes), np.zeros(len(template.vertices)))


def _mean_pose(template: SkeletonTemplate, mean: np.ndarray) -> np.ndarray:
    k = template.n_joints
    rot = np.zeros((k, 3))
    if mean.size == 3 * k:
        rot[:] = mean.reshape(k, 3)
    else:
        rot[[j for j in range(k) if j != template.root]] = mean.reshape(k - 1, 3)
    return rot


def select_prior_starts(problem: SequenceEnergy, params: ParamBlock, gmm: GmmPrior) -> ParamBlock:
    """Per frame, restart the non-root joints from the mixture mean with the lowest frame energy."""
    w = problem.weights
    root = problem.template.root
    best_e = np.full(params.n_frames, np.inf)
    rotations = params.rotations.copy()
    order = np.argsort(-gmm.weights, kind="stable")  # ties keep the heavier component
    for r in order:
        cand = np.repeat(_mean_pose(problem.template, gmm.means[r])[None], params.n_frames, axis=0)
        cand[:, root] = params.rotations[:, root]
        pf = problem.evaluate(params.copy(rotations=cand)).per_frame
        e = w.sim * pf["sim"] + w.joint * pf["joint"] + w.pose * pf["pose"]
        better = e < best_e
        best_e = np.where(better, e, best_e)
        rotations[better] = cand[better]
    return params.copy(rotations=rotations)


def _energy_and_grad(problem: SequenceEnergy, params: ParamBlock, stage: str):
    corr = problem.correspondences(params)
    try:
        return gradient(problem.objective(corr), params, with_value=True)
    except NonFiniteError as exc:
        raise FitError(f"{stage}: {exc}", params, stage, exc.term) from exc


MAX_HALVINGS = 10


def _run_stage(problem, params, stage, iters, cfg: FitConfig, trace: StageTrace, state=None, best=None):
    """Adam on ``stage`` blocks; returns (last params, state, (best params, best energy)).

    With ``cfg.reject_uphill`` a pose step that raises the energy by more
    than the tolerance is undone, the moments are reset and the learning
    rate is halved, so the recorded pose trace does not climb. The stage
    also ends once the rate has been halved ``MAX_HALVINGS`` times.
    """
    mask = params.mask(STAGE_BLOCKS[stage])
    lr = cfg.lr if stage == "pose" else cfg.shape_lr

    def fresh(rate):
        return AdamState.zeros(mask.size, rate, mask, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    if state is None:
        state = fresh(lr)
    best_params, best_e = best if best is not None else (params, np.inf)
    accepted = None  # (params, energy, grad) of the current iterate
    moved = []  # energies after accepted steps; rejections do not count toward patience
    # shape updates move the energy by about as much as ray-hit changes do, so only pose steps are guarded
    guarded = cfg.reject_uphill and stage == "pose"
    for _ in range(iters):
        try:
            grad, energy = _energy_and_grad(problem, params, stage)
        except FitError as exc:
            if accepted is not None:
                exc.params = accepted[0]
            raise
        rejected = (
            guarded
            and accepted is not None
            and energy > accepted[1] + cfg.tolerance * abs(accepted[1])
        )
        if rejected:
            params, energy, grad = accepted
            state = fresh(state.lr * 0.5)
        else:
            moved.append(energy)
        accepted = (params, energy, grad)
        trace.energies.append(energy)
        if energy < best_e:
            best_params, best_e = params, energy
        trace.best.append(best_e)
        if _converged(moved, cfg) or state.lr < lr * 0.5**MAX_HALVINGS:
            trace.converged = True
            break
        params, state = adam_step(state, params, grad)
    if accepted is not None:
        params = accepted[0]
    return params, state, (best_params, best_e)


def _converged(energies: list, cfg: FitConfig) -> bool:
    """Relative change below tolerance on each of the last ``patience`` iterations."""
    if len(energies) <= cfg.patience:
        return False
    e = np.asarray(energies[-1 - cfg.patience :])
    rel = np.abs(np.diff(e)) / np.maximum(np.abs(e[:-1]), 1e-12)
    return bool(np.all(rel < cfg.tolerance))


def fit_sequence(
    observations: list[FrameObservation],
    template: SkeletonTemplate,
    gmm: GmmPrior,
    config: FitConfig | None = None,
) -> FitResult:
    cfg = config or FitConfig()
    validate_observations(observations, cfg.weights)
    lap = LaplacianOperator.from_template(template, cfg.laplacian)
    problem = SequenceEnergy(template, observations, gmm, cfg.weights, lap)

    branches = {}
    for yaw in cfg.yaws:
        trace = StageTrace()
        start = init_params(observations, template, gmm, yaw)
        if cfg.prior_starts:
            start = select_prior_starts(problem, start, gmm)
        last, state, best = _run_stage(problem, start, "pose", max(cfg.warmup_iters, 1), cfg, trace)
        branches[yaw] = (trace, last, state, best)
        log.info("yaw %.3f warmup energy %.6g", yaw, best[1])
    yaw = min(cfg.yaws, key=lambda y: (branches[y][3][1], cfg.yaws.index(y)))
    trace, last, state, best = branches[yaw]
    initial = trace.energies[0]

    remaining = cfg.pose_iters - trace.iterations
    if remaining > 0 and not trace.converged:
        last, state, best = _run_stage(problem, last, "pose", remaining, cfg, trace, state, best)
    pose_trace = trace

    shape_trace = StageTrace()
    start = best[0]
    best = (start, best[1])
    _, _, best = _run_stage(problem, start, "shape", cfg.shape_iters, cfg, shape_trace, None, best)

    params, energy = best
    breakdown = problem.evaluate(params)
    return FitResult(
        params=params,
        yaw=yaw,
        traces={"pose": pose_trace, "shape": shape_trace},
        warmup={y: branches[y][3][1] for y in cfg.yaws},
        breakdown=dict(breakdown.terms),
        initial_energy=float(initial),
        final_energy=float(energy),
    )


# --- evaluation -------------------------------------------------------------


class MetricError(ValueError):
    pass


def _frames(x):
    x = np.asarray(x, dtype=float)
    return x[None] if x.ndim == 2 else x


def _chamfer_value(a, b) -> float:
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float((da**2).mean() + (db**2).mean())


def metrics(pred_vertices, gt_vertices, pred_joints, gt_joints) -> dict[str, float]:
    """PVE, MPJPE and CD in centimeters, averaged over frames.

    Inputs are single frames ``(N, 3)`` or sequences ``(T, N, 3)``. CD is the
    square root of the symmetric mean-squared Chamfer value between vertex sets.
    """
    pv, gv = _frames(pred_vertices), _frames(gt_vertices)
    pj, gj = _frames(pred_joints), _frames(gt_joints)
    if pv.shape != gv.shape:
        raise MetricError(f"vertex sets differ in topology: {pv.shape} vs {gv.shape}")
    if pj.shape != gj.shape:
        raise MetricError(f"joint sets differ: {pj.shape} vs {gj.shape}")
    pve = float(np.linalg.norm(pv - gv, axis=-1).mean())
    mpjpe = float(np.linalg.norm(pj - gj, axis=-1).mean())
    cd = float(np.mean([np.sqrt(_chamfer_value(a, b)) for a, b in zip(pv, gv)]))
    return {"PVE": 100.0 * pve, "MPJPE": 100.0 * mpjpe, "CD": 100.0 * cd}


def posed_result(template: SkeletonTemplate, params: ParamBlock):
    return pose_sequence(template, params.rotations, params.offsets, ShapeParams(params.scales, params.displacements))


# --- asset-bank admission ---------------------------------------------------


@dataclass(frozen=True)
class AdmissionFilter:
    min_points: int = 100
    min_frames: int = 10
    joint_score_floor: float = 0.1
    joint_score_fraction: float = 0.7
    max_e_sim: float = 20.0
    max_e_joint: float = 6.0
    max_e_other: float = 22.0  # second, ambiguous energy cap; applied to the pose prior


def frame_admission(observations, per_frame: dict, flt: AdmissionFilter | None = None) -> np.ndarray:
    """Per-frame boolean: enough points, confident joints and energies under the caps."""
    flt = flt or AdmissionFilter()
    ok = []
    for t, o in enumerate(observations):
        conf = o.joints2d.confidence
        good = (
            len(o.scan.target_points) >= flt.min_points
            and (len(conf) == 0 or np.mean(conf > flt.joint_score_floor) >= flt.joint_score_fraction)
            and per_frame["sim"][t] < flt.max_e_sim
            and per_frame["joint"][t] < flt.max_e_joint
            and per_frame["pose"][t] < flt.max_e_other
        )
        ok.append(bool(good))
    return np.array(ok)


def admit(observations, per_frame: dict, flt: AdmissionFilter | None = None) -> tuple[bool, dict]:
    flt = flt or AdmissionFilter()
    frames = frame_admission(observations, per_frame, flt)
    report = {"frames_kept": int(frames.sum()), "frames_total": len(frames)}
    return bool(frames.sum() >= flt.min_frames), report
