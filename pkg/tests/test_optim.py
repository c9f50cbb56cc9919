import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from pedrecon.energy import chamfer
from pedrecon.optim import (
    SCALE_BOUNDS,
    AdamState,
    NonFiniteError,
    ParamBlock,
    adam_step,
    evaluate,
    gradient,
)


def block(t=2, k=3, c=2, n=4, seed=0):
    rng = np.random.default_rng(seed)
    return ParamBlock(rng.normal(size=(t, k, 3)), rng.normal(size=(t, 3)), rng.uniform(0.8, 1.2, c), rng.normal(size=n))


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 6))
def test_flatten_roundtrip(t, k, c, n):
    p = block(t, k, c, n)
    q = p.unflatten(p.flatten())
    for name in ("rotations", "offsets", "scales", "displacements"):
        np.testing.assert_array_equal(getattr(p, name), getattr(q, name))
    assert p.flatten().size == sum(p.sizes.values())
    sl = p.slices()
    np.testing.assert_array_equal(p.flatten()[sl["scales"]], p.scales)
    assert p.mask(["offsets"]).sum() == t * 3


def test_gradient_of_square():
    p = ParamBlock(np.zeros((1, 1, 3)), np.zeros((1, 3)), [3.0], np.zeros(0))
    g = gradient(lambda x: (x["scales"] ** 2).sum(), p)
    assert g[p.slices()["scales"]][0] == 6.0


def test_chamfer_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    y = rng.normal(size=(30, 3))
    x0 = rng.normal(size=(20, 3))

    def f(t):
        pts = torch.tensor(x0) + t["offsets"][0]
        d = ((pts[:, None] - torch.tensor(y)[None]) ** 2).sum(-1)
        return d.min(1).values.mean() + d.min(0).values.mean()

    p = ParamBlock(np.zeros((1, 1, 3)), rng.normal(scale=0.01, size=(1, 3)), [1.0], np.zeros(0))
    g = gradient(f, p)[p.slices()["offsets"]]
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fp = chamfer(x0 + p.offsets[0] + e, y)
        fm = chamfer(x0 + p.offsets[0] - e, y)
        fd = (fp - fm) / (2 * h)
        assert abs(g[i] - fd) / max(abs(fd), 1e-8) < 1e-4


def test_first_adam_step_is_lr_sized():
    p = block()
    g = np.random.default_rng(2).normal(size=p.flatten().size)
    st_ = AdamState.zeros(g.size, lr=1e-2)
    q, st2 = adam_step(st_, p, g)
    moved = p.flatten() - q.flatten()
    sl = p.slices()["scales"]
    free = np.ones(g.size, bool)
    free[sl] = False  # scales may be clamped
    assert np.all(np.sign(moved[free]) == np.sign(g[free]))
    assert np.all(np.abs(moved[free]) <= 1e-2 + 1e-15)
    assert np.all(np.abs(moved[free]) >= 1e-2 * (1 - 1e-5))
    assert st2.step == 1


def test_zero_gradient_is_fixed_point():
    p = block()
    st_ = AdamState.zeros(p.flatten().size)
    q = p
    for _ in range(20):
        q, st_ = adam_step(st_, q, np.zeros(p.flatten().size))
    np.testing.assert_array_equal(q.flatten(), p.flatten())


def test_quadratic_converges():
    target = 0.7
    p = ParamBlock(np.zeros((1, 1, 3)), np.array([[2.0, 0, 0]]), [1.0], np.zeros(0))
    st_ = AdamState.zeros(p.flatten().size, lr=1e-2)
    for _ in range(500):
        g = gradient(lambda t: ((t["offsets"][0, 0] - target) ** 2), p)
        p, st_ = adam_step(st_, p, g)
    assert abs(p.offsets[0, 0] - target) < 1e-3


def test_mask_freezes_blocks_and_scales_clamp():
    p = block()
    mask = p.mask(["scales"])
    st_ = AdamState.zeros(mask.size, lr=5.0, mask=mask)
    q, _ = adam_step(st_, p, np.ones(mask.size))
    np.testing.assert_array_equal(q.rotations, p.rotations)
    assert np.all(q.scales == SCALE_BOUNDS[0])


def test_non_finite_term_is_named():
    p = block()
    with pytest.raises(NonFiniteError) as err:
        evaluate(lambda t: (t["scales"].sum() * np.nan, {"bone": t["scales"].sum() * np.nan}), p)
    assert err.value.term == "bone"
