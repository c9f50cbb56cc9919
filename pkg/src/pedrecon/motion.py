"""Procedural walking poses for the built-in humanoid.

Stands in for a motion-capture corpus: the default pose prior is fit to
samples from :func:`gait_pose` and the synthetic scenes draw their pose
trajectories from the same family.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .gmm import GmmPrior, fit_gmm

N_JOINTS = 17
Y = np.array([0.0, 1.0, 0.0])
Z = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class GaitStyle:
    hip_amp: float = 0.35
    knee_amp: float = 0.5
    arm_amp: float = 0.25
    elbow_bend: float = 0.3
    lean: float = 0.05

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "GaitStyle":
        return cls(
            hip_amp=rng.uniform(0.2, 0.45),
            knee_amp=rng.uniform(0.3, 0.7),
            arm_amp=rng.uniform(0.1, 0.4),
            elbow_bend=rng.uniform(0.15, 0.5),
            lean=rng.uniform(0.0, 0.1),
        )


def gait_pose(phase: float, style: GaitStyle = GaitStyle()) -> np.ndarray:
    """Axis-angle rotations ``(17, 3)`` of a walk cycle at ``phase`` radians.

    Leg and arm swings rotate about +y (negative swings forward), the spine
    twists about +z. The root rotation is left at zero.
    """
    s, c = np.sin(phase), np.cos(phase)
    r = np.zeros((N_JOINTS, 3))
    r[1] = 0.5 * style.lean * Y + 0.05 * s * Z
    r[2] = 0.5 * style.lean * Y - 0.04 * s * Z
    r[3] = -0.5 * style.lean * Y
    r[5] = (-style.hip_amp * s - 0.05) * Y
    r[8] = (style.hip_amp * s - 0.05) * Y
    r[6] = (0.1 + style.knee_amp * (0.5 + 0.5 * np.sin(phase + 0.5))) * Y
    r[9] = (0.1 + style.knee_amp * (0.5 - 0.5 * np.sin(phase + 0.5))) * Y
    r[7] = (-0.1 * c - 0.05) * Y
    r[10] = (0.1 * c - 0.05) * Y
    r[11] = style.arm_amp * s * Y
    r[14] = -style.arm_amp * s * Y
    r[12] = -(style.elbow_bend + 0.1 * (0.5 + 0.5 * s)) * Y
    r[15] = -(style.elbow_bend + 0.1 * (0.5 - 0.5 * s)) * Y
    return r


def pose_samples(n: int, seed: int = 0, noise: float = 0.03) -> np.ndarray:
    """Flattened non-root pose vectors ``(n, 48)`` drawn from random gaits."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, 3 * (N_JOINTS - 1)))
    for i in range(n):
        pose = gait_pose(rng.uniform(0.0, 2.0 * np.pi), GaitStyle.sample(rng))
        out[i] = pose[1:].ravel() + rng.normal(0.0, noise, size=out.shape[1])
    return out


@lru_cache(maxsize=4)
def default_prior(seed: int = 0, n_samples: int = 4000, n_components: int = 8) -> GmmPrior:
    """Pose prior over the 16 non-root joints of the built-in humanoid."""
    return fit_gmm(pose_samples(n_samples, seed), n_components, max_iters=100, seed=seed).prior
