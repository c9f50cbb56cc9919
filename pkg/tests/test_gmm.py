import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from pedrecon.gmm import REG_COVAR, GmmPrior, PriorError, fit_gmm, gmm_nll_torch
from pedrecon.motion import gait_pose, pose_samples


def random_prior(rng, r=3, d=4):
    a = rng.normal(size=(r, d, d))
    covs = a @ a.transpose(0, 2, 1) + 0.5 * np.eye(d)
    w = rng.uniform(0.2, 1.0, r)
    return GmmPrior.from_covariances(w / w.sum(), rng.normal(size=(r, d)), covs)


def test_density_matches_scipy_mixture():
    rng = np.random.default_rng(0)
    g = random_prior(rng)
    x = rng.normal(size=(50, 4))
    want = np.log(sum(w * multivariate_normal(m, c).pdf(x) for w, m, c in zip(g.weights, g.means, g.covariances)))
    np.testing.assert_allclose(g.log_density(x), want, rtol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_torch_nll_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    g = random_prior(rng)
    x = rng.normal(size=(6, 4)) * 3
    got = gmm_nll_torch(g, torch.tensor(x)).numpy()
    np.testing.assert_allclose(got, -g.log_density(x), rtol=1e-10)


def test_far_point_stays_finite():
    g = random_prior(np.random.default_rng(1))
    x = torch.full((1, 4), 1e4, dtype=torch.float64, requires_grad=True)
    v = gmm_nll_torch(g, x).sum()
    v.backward()
    assert torch.isfinite(v) and torch.isfinite(x.grad).all()


def test_single_gaussian_mean_recovered():
    rng = np.random.default_rng(2)
    d, n = 3, 3000
    mu = np.array([0.5, -1.0, 2.0])
    sd = np.array([0.3, 1.0, 0.6])
    x = mu + sd * rng.normal(size=(n, d))
    fit = fit_gmm(x, n_components=1)
    assert np.all(np.abs(fit.prior.means[0] - mu) < 3 * sd / np.sqrt(n))


def test_identical_samples_give_floor_covariance():
    x = np.tile([1.0, 2.0], (10, 1))
    fit = fit_gmm(x, n_components=1)
    np.testing.assert_allclose(fit.prior.means[0], [1.0, 2.0])
    np.testing.assert_allclose(fit.prior.covariances[0], REG_COVAR * np.eye(2), rtol=1e-9, atol=1e-20)


def test_em_log_likelihood_monotone():
    rng = np.random.default_rng(3)
    x = np.vstack([rng.normal(size=(300, 2)) + c for c in ([0, 0], [4, 0], [0, 5])])
    fit = fit_gmm(x, n_components=3, max_iters=50)
    assert np.all(np.diff(fit.log_likelihood) >= -1e-10)


def test_invalid_priors_rejected():
    with pytest.raises(PriorError):
        GmmPrior([0.5, 0.4], np.zeros((2, 2)), np.tile(np.eye(2), (2, 1, 1)))
    with pytest.raises(PriorError):
        GmmPrior.from_covariances([1.0], np.zeros((1, 2)), -np.eye(2)[None])
    with pytest.raises(PriorError):
        fit_gmm(np.zeros((5, 4)), n_components=2)


def test_default_prior_favours_gait_poses(prior):
    assert prior.n_components == 8 and prior.dim == 48
    walk = gait_pose(0.7)[1:].ravel()
    odd = np.random.default_rng(0).normal(scale=0.8, size=48)
    assert prior.nll(walk) < prior.nll(odd)


def test_pose_samples_are_deterministic():
    np.testing.assert_array_equal(pose_samples(20, seed=4), pose_samples(20, seed=4))
