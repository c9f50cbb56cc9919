"""Finite-difference check of every energy term's autograd gradient.

Each trial perturbs a small synthetic two-frame problem, freezes ray hits
and nearest-neighbour pairings at the perturbed point and compares the
analytic gradient against central differences along random coordinates
and one random direction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .energy import SequenceEnergy
from .motion import default_prior
from .optim import ParamBlock, evaluate, gradient
from .simulate import SynthConfig, synth_ground_truth
from .template import HumanoidConfig, make_template

STEP = 1e-5
CHECK_TERMS = ("sim", "joint", "pose", "shape", "total")


@dataclass
class GradcheckReport:
    max_rel_error: dict  # term -> worst relative error over all trials
    trials: int
    seconds: float

    def passed(self, tol: float = 1e-4) -> bool:
        return all(e < tol for e in self.max_rel_error.values())


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _term_objective(problem: SequenceEnergy, corr, term: str):
    if term == "total":
        return problem.objective(corr)

    def f(tensors):
        w = problem.weighted(problem.frame_terms(tensors, corr))
        if term == "shape":
            value = w["lap"] + w["l2"]
        elif term == "pose":
            value = w["pose"] + w["bone"]
        else:
            value = w[term]
        return value, {term: value}

    return f


def small_problem(seed: int):
    template = make_template(HumanoidConfig(resolution=0.5))
    cfg = SynthConfig(n_frames=2, resolution_deg=0.65, pixel_noise=2.0)
    obs, truth = synth_ground_truth(template, seed, cfg)
    return template, obs, truth


def perturb(params: ParamBlock, rng: np.random.Generator) -> ParamBlock:
    return ParamBlock(
        params.rotations + rng.normal(0.0, 0.1, params.rotations.shape),
        params.offsets + rng.normal(0.0, 0.02, params.offsets.shape),
        params.scales * np.exp(rng.normal(0.0, 0.05, params.scales.shape)),
        params.displacements + rng.normal(0.0, 0.005, params.displacements.shape),
    )


def check_trial(problem: SequenceEnergy, params: ParamBlock, rng, n_coords: int = 3, h: float = STEP) -> dict:
    corr = problem.correspondences(params)
    x0 = params.flatten()
    sl = params.slices()
    out = {}
    for term in CHECK_TERMS:
        f = _term_objective(problem, corr, term)
        g = gradient(f, params)
        floor = 1e-6 * max(1.0, float(np.abs(g).max()))
        # one coordinate from every block, plus extra random ones and a random direction
        coords = [int(rng.integers(s.start, s.stop)) for s in sl.values()]
        coords += [int(i) for i in rng.integers(0, x0.size, n_coords)]
        worst = 0.0
        for i in coords:
            e = np.zeros_like(x0)
            e[i] = h
            fd = (evaluate(f, params.unflatten(x0 + e)) - evaluate(f, params.unflatten(x0 - e))) / (2 * h)
            worst = max(worst, relative_error(g[i], fd, floor))
        d = rng.normal(size=x0.size)
        d /= np.linalg.norm(d)
        fd = (evaluate(f, params.unflatten(x0 + h * d)) - evaluate(f, params.unflatten(x0 - h * d))) / (2 * h)
        worst = max(worst, relative_error(float(g @ d), fd, floor))
        out[term] = worst
    return out


def run_gradcheck(seed: int = 1, trials: int = 100, n_coords: int = 3) -> GradcheckReport:
    start = time.time()
    rng = np.random.default_rng(seed)
    template, obs, truth = small_problem(seed)
    problem = SequenceEnergy(template, obs, default_prior())
    worst = {t: 0.0 for t in CHECK_TERMS}
    for _ in range(trials):
        errs = check_trial(problem, perturb(truth.params, rng), rng, n_coords)
        for t, e in errs.items():
            worst[t] = max(worst[t], e)
    return GradcheckReport(worst, trials, time.time() - start)
