"""Diagonal-covariance Gaussian mixtures: EM fitting, log density, sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .numerics import make_rng

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood_trace: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if mu.shape != var.shape or mu.shape[0] != w.shape[0]:
            raise ValueError(f"inconsistent shapes: weights {w.shape}, means {mu.shape}, variances {var.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        for name, a in (("weights", w), ("means", mu), ("variances", var)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 200
    tol: float = 1e-8
    variance_floor: float = 1e-6
    init: str = "kmeans_pp"
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0 or self.variance_floor <= 0:
            raise ValueError("tol and variance_floor must be positive")
        if self.init not in ("kmeans_pp", "random_points"):
            raise ValueError(f"unknown init {self.init!r}")


def _component_log_densities(x: np.ndarray, means, variances, log_weights) -> np.ndarray:
    # (n, k): log w_k + log N(x_n; mu_k, diag var_k)
    diff = x[:, None, :] - means[None, :, :]
    quad = (diff * diff / variances[None]).sum(axis=2)
    logdet = np.log(variances).sum(axis=1)
    d = x.shape[1]
    return log_weights[None, :] - 0.5 * (d * LOG_2PI + logdet[None, :] + quad)


def log_pdf(model: GmmModel, x) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.dim:
        raise ValueError(f"dimension mismatch: model has d={model.dim}, point has {x.shape[0]}")
    with np.errstate(divide="ignore"):
        logw = np.log(model.weights)
    comp = _component_log_densities(x[None, :], model.means, model.variances, logw)
    return float(logsumexp(comp, axis=1)[0])


def log_pdf_batch(model: GmmModel, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: model has d={model.dim}, points have {x.shape[1]}")
    with np.errstate(divide="ignore"):
        logw = np.log(model.weights)
    return logsumexp(_component_log_densities(x, model.means, model.variances, logw), axis=1)


def sample(model: GmmModel, seed: int) -> np.ndarray:
    rng = make_rng(seed)
    mode = int(rng.choice(model.k, p=model.weights))
    return model.means[mode] + np.sqrt(model.variances[mode]) * rng.standard_normal(model.dim)


def sample_n(model: GmmModel, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = make_rng(seed)
    modes = rng.choice(model.k, size=n, p=model.weights)
    eps = rng.standard_normal((n, model.dim))
    return model.means[modes] + np.sqrt(model.variances[modes]) * eps, modes


def sorted_means(model: GmmModel) -> np.ndarray:
    """Means in lexicographic order (first coordinate, then second, ...). Stable on ties."""
    mu = model.means
    order = np.lexsort(mu.T[::-1])
    return mu[order]


def _canonical_order(x: np.ndarray) -> np.ndarray:
    # order keys rounded so sub-1e-9 perturbations do not reshuffle points
    keys = np.round(x, 9)
    return np.lexsort(keys.T[::-1])


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def fit_em(points, k: int, cfg: EmConfig = EmConfig()) -> GmmModel:
    """Fit a k-mode diagonal GMM by EM.

    Input points are put into a canonical order first, so the fit does not
    depend on the order they were supplied in. When there are fewer points
    than modes, modes are seeded from points drawn with replacement plus
    floor-scale noise.
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if x.size == 0 or x.shape[0] == 0:
        raise ValueError("cannot fit a mixture to zero points")
    if not np.all(np.isfinite(x)):
        raise ValueError("points contain non-finite values")
    if k < 1:
        raise ValueError("k must be >= 1")
    x = x[_canonical_order(x)]
    n, d = x.shape
    rng = make_rng(cfg.seed)
    floor = cfg.variance_floor

    if n < k:
        idx = np.concatenate([np.arange(n), rng.integers(n, size=k - n)])
        means = x[idx] + np.sqrt(floor) * rng.standard_normal((k, d))
        means[:n] = x
    elif cfg.init == "kmeans_pp":
        means = _kmeans_pp(x, k, rng)
    else:
        means = x[rng.choice(n, size=k, replace=False)]
    spread = np.maximum(x.var(axis=0), floor)
    variances = np.tile(spread, (k, 1))
    weights = np.full(k, 1.0 / k)

    trace = []
    prev = -np.inf
    for _ in range(cfg.max_iters):
        with np.errstate(divide="ignore"):
            logw = np.log(weights)
        comp = _component_log_densities(x, means, variances, logw)
        norm = logsumexp(comp, axis=1)
        ll = float(norm.sum())
        trace.append(ll)
        if np.isfinite(prev) and (ll - prev) <= cfg.tol * max(abs(prev), 1.0):
            break
        prev = ll
        resp = np.exp(comp - norm[:, None])
        nk = resp.sum(axis=0)
        weights = nk / n
        live = nk > 1e-12
        safe = np.where(live, nk, 1.0)
        new_means = (resp.T @ x) / safe[:, None]
        diff = x[:, None, :] - new_means[None, :, :]
        new_vars = np.einsum("nk,nkd->kd", resp, diff * diff) / safe[:, None]
        means = np.where(live[:, None], new_means, means)
        variances = np.where(live[:, None], np.maximum(new_vars, floor), variances)
    weights = weights / weights.sum()
    return GmmModel(weights, means, variances, tuple(trace))
