"""Parameter packing, reverse-mode gradients and the Adam stepper.

Gradients come from torch autograd in float64. Objectives receive a dict of
leaf tensors keyed like :class:`ParamBlock` fields and return a scalar tensor,
optionally together with a dict of named terms used for diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

DTYPE = torch.float64
BLOCKS = ("rotations", "offsets", "scales", "displacements")
STAGE_BLOCKS = {
    "pose": ("rotations", "offsets", "scales"),
    "shape": ("displacements",),
}
SCALE_BOUNDS = (0.5, 2.0)


class NonFiniteError(FloatingPointError):
    """An objective evaluated to NaN or infinity."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


@dataclass(frozen=True)
class ParamBlock:
    """Sequence parameters: per-frame rotations and root offsets, shared shape.

    Flattening order is rotations ``(T, K, 3)``, offsets ``(T, 3)``, scales
    ``(C,)`` then displacements ``(N,)``, each in C order.
    """

    rotations: np.ndarray
    offsets: np.ndarray
    scales: np.ndarray
    displacements: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotations, dtype=float)
        object.__setattr__(self, "rotations", rot.reshape(rot.shape[0], -1, 3))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=float).reshape(-1))
        object.__setattr__(self, "displacements", np.asarray(self.displacements, dtype=float).reshape(-1))
        if len(self.offsets) != len(self.rotations):
            raise ValueError("rotations and offsets disagree on the number of frames")

    @property
    def n_frames(self) -> int:
        return len(self.rotations)

    @property
    def sizes(self) -> dict[str, int]:
        return {name: getattr(self, name).size for name in BLOCKS}

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, name).ravel() for name in BLOCKS])

    def unflatten(self, vec) -> "ParamBlock":
        vec = np.asarray(vec, dtype=float)
        if vec.size != sum(self.sizes.values()):
            raise ValueError("vector length does not match the parameter layout")
        out, start = {}, 0
        for name in BLOCKS:
            ref = getattr(self, name)
            out[name] = vec[start : start + ref.size].reshape(ref.shape)
            start += ref.size
        return ParamBlock(**out)

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name in BLOCKS:
            n = getattr(self, name).size
            out[name] = slice(start, start + n)
            start += n
        return out

    def mask(self, active) -> np.ndarray:
        """Boolean mask over the flat vector selecting the named blocks."""
        m = np.zeros(sum(self.sizes.values()), dtype=bool)
        for name, sl in self.slices().items():
            if name in active:
                m[sl] = True
        return m

    def tensors(self, requires_grad: bool = False) -> dict[str, torch.Tensor]:
        return {
            name: torch.tensor(getattr(self, name), dtype=DTYPE, requires_grad=requires_grad) for name in BLOCKS
        }

    def copy(self, **changes) -> "ParamBlock":
        return replace(self, **{k: np.array(v, dtype=float) for k, v in changes.items()})


def _call(objective, tensors):
    out = objective(tensors)
    if isinstance(out, tuple):
        return out[0], out[1]
    return out, {}


def evaluate(objective, params: ParamBlock) -> float:
    with torch.no_grad():
        value, terms = _call(objective, params.tensors())
    _check_finite(value, terms)
    return float(value)


def _check_finite(value, terms):
    if torch.isfinite(value).all():
        return
    for name, term in terms.items():
        if not torch.isfinite(torch.as_tensor(term)).all():
            raise NonFiniteError(f"energy term {name!r} is not finite", term=name)
    raise NonFiniteError("objective is not finite")


def gradient(objective, params: ParamBlock, with_value: bool = False):
    """Flat gradient of ``objective`` at ``params`` (same layout as :meth:`ParamBlock.flatten`)."""
    leaves = params.tensors(requires_grad=True)
    value, terms = _call(objective, leaves)
    _check_finite(value, terms)
    grads = torch.autograd.grad(value, [leaves[n] for n in BLOCKS], allow_unused=True)
    flat = np.concatenate(
        [
            (g.detach().numpy() if g is not None else np.zeros(leaves[n].shape)).ravel()
            for n, g in zip(BLOCKS, grads)
        ]
    )
    if with_value:
        return flat, float(value.detach())
    return flat


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mask: np.ndarray | None = field(default=None)

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-2, mask=None, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, mask=None if mask is None else np.asarray(mask, bool), **kw)


def adam_step(state: AdamState, params: ParamBlock, grad) -> tuple[ParamBlock, AdamState]:
    """One bias-corrected Adam update; masked-out coordinates stay fixed.

    Bone scales are clamped to ``SCALE_BOUNDS`` afterwards.
    """
    g = np.asarray(grad, dtype=float)
    if g.shape != state.m.shape:
        raise ValueError("gradient and optimizer state sizes differ")
    if state.mask is not None:
        g = np.where(state.mask, g, 0.0)
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = m / (1.0 - state.beta1**t)
    vhat = v / (1.0 - state.beta2**t)
    update = state.lr * mhat / (np.sqrt(vhat) + state.eps)
    if state.mask is not None:
        update = np.where(state.mask, update, 0.0)
    x = params.flatten() - update
    new = params.unflatten(x)
    scale_mask = np.ones(new.scales.shape, bool) if state.mask is None else state.mask[params.slices()["scales"]]
    new = new.copy(scales=np.where(scale_mask, np.clip(new.scales, *SCALE_BOUNDS), new.scales))
    return new, replace(state, m=m, v=v, step=t)
