"""Gaussian-mixture pose prior: density evaluation and EM fitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

log = logging.getLogger(__name__)

REG_COVAR = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


class PriorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GmmPrior:
    """Full-covariance mixture stored through lower Cholesky factors."""

    weights: np.ndarray  # (R,)
    means: np.ndarray  # (R, D)
    chol: np.ndarray  # (R, D, D) lower triangular, cov = L L^T

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.asarray(self.means, dtype=float).reshape(len(w), -1)
        L = np.asarray(self.chol, dtype=float).reshape(len(w), mu.shape[1], mu.shape[1])
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise PriorError("mixture weights must be positive and sum to 1")
        diag = np.diagonal(L, axis1=1, axis2=2)
        if np.any(diag <= 0) or not np.all(np.isfinite(L)):
            raise PriorError("covariance factors must be lower triangular with a positive diagonal")
        if np.any(np.triu(L, 1) != 0):
            raise PriorError("covariance factors must be lower triangular")
        for arr in (w, mu, L):
            arr.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "chol", L)

    @classmethod
    def from_covariances(cls, weights, means, covariances) -> "GmmPrior":
        covs = np.asarray(covariances, dtype=float)
        if not np.allclose(covs, np.swapaxes(covs, 1, 2), rtol=0, atol=1e-12):
            raise PriorError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError:
            raise PriorError("covariance is singular or not positive definite") from None
        return cls(weights, means, chol)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def covariances(self) -> np.ndarray:
        return self.chol @ np.swapaxes(self.chol, 1, 2)

    @property
    def top_mean(self) -> np.ndarray:
        return self.means[int(np.argmax(self.weights))]

    def _component_logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.empty((len(x), self.n_components))
        for r in range(self.n_components):
            z = solve_triangular(self.chol[r], (x - self.means[r]).T, lower=True)
            logdet = np.log(np.diagonal(self.chol[r])).sum()
            out[:, r] = -0.5 * (z * z).sum(0) - logdet - 0.5 * self.dim * LOG_2PI
        return out

    def log_density(self, x) -> np.ndarray:
        return logsumexp(self._component_logpdf(x) + np.log(self.weights), axis=1)

    def nll(self, x) -> float:
        return float(-self.log_density(np.asarray(x, dtype=float).reshape(1, -1))[0])

    def max_log_density(self) -> float:
        """Upper bound on the mixture log-density (sum of component peaks)."""
        peaks = -np.log(np.diagonal(self.chol, axis1=1, axis2=2)).sum(1) - 0.5 * self.dim * LOG_2PI
        return float(logsumexp(peaks + np.log(self.weights)))

    def torch_terms(self):
        """Tensors used by :func:`gmm_nll_torch`, cached on the instance."""
        cached = self.__dict__.get("_torch")
        if cached is None:
            inv = np.linalg.inv(self.chol)
            const = np.log(self.weights) - np.log(np.diagonal(self.chol, axis1=1, axis2=2)).sum(1) - 0.5 * self.dim * LOG_2PI
            cached = tuple(torch.tensor(np.array(a), dtype=torch.float64) for a in (self.means, inv, const))
            self.__dict__["_torch"] = cached
        return cached


def gmm_nll_torch(prior: GmmPrior, x: torch.Tensor) -> torch.Tensor:
    """Negative log-density of each row of ``x`` (shape ``(B, D)``)."""
    means, inv, const = prior.torch_terms()
    diff = x[:, None, :] - means[None]
    z = torch.einsum("rij,brj->bri", inv, diff)
    return -torch.logsumexp(const[None] - 0.5 * (z * z).sum(-1), dim=1)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


@dataclass(frozen=True)
class GmmFit:
    prior: GmmPrior
    log_likelihood: list[float]


def fit_gmm(samples, n_components: int = 8, max_iters: int = 200, seed: int = 0, tol: float = 1e-8) -> GmmFit:
    """Expectation-maximization with k-means++ seeding.

    Every M-step adds ``REG_COVAR * I`` to the covariances. The returned
    trace holds the mean log-likelihood of the parameters after each M-step.
    """
    x = np.asarray(samples, dtype=float)
    n, d = x.shape
    if n < n_components * d:
        raise PriorError(f"need at least {n_components * d} samples for {n_components} components in {d} dims, got {n}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, n_components, rng)
    assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((n, n_components))
    resp[np.arange(n), assign] = 1.0
    trace: list[float] = []
    prior = None
    for it in range(max_iters):
        nk = resp.sum(0) + 10 * np.finfo(float).eps
        means = (resp.T @ x) / nk[:, None]
        covs = np.empty((n_components, d, d))
        for r in range(n_components):
            diff = x - means[r]
            covs[r] = (resp[:, r, None] * diff).T @ diff / nk[r] + REG_COVAR * np.eye(d)
        weights = nk / nk.sum()
        prior = GmmPrior.from_covariances(weights, means, 0.5 * (covs + np.swapaxes(covs, 1, 2)))
        logp = prior._component_logpdf(x) + np.log(prior.weights)
        ll = logsumexp(logp, axis=1)
        trace.append(float(ll.mean()))
        resp = np.exp(logp - ll[:, None])
        if it > 0 and abs(trace[-1] - trace[-2]) <= tol * max(1.0, abs(trace[-2])):
            break
    log.debug("EM stopped after %d iterations, mean log-likelihood %.6f", len(trace), trace[-1])
    return GmmFit(prior, trace)
