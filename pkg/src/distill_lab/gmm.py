"""Gaussian mixtures: density, sampling, EM fitting and weight tempering."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
# Largest usable inverse temperature; beyond this the weights are one-hot to
# double precision anyway.
MAX_BETA = 1e6
COLLAPSE_WEIGHT = 1e-8


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """A covariance matrix failed its Cholesky factorization."""

    def __init__(self, index: Optional[int], message: str = ""):
        self.index = index
        where = f"component {index}" if index is not None else "covariance"
        super().__init__(f"{where} is not positive definite{': ' + message if message else ''}")


@dataclass(frozen=True)
class GaussianComponent:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if mean.ndim != 1:
            raise ValueError(f"mean must be a vector, got shape {mean.shape}")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dimension {d}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("component parameters must be finite")
        cov = 0.5 * (cov + cov.T)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def cholesky(self, index: Optional[int] = None) -> np.ndarray:
        try:
            return scipy.linalg.cholesky(self.covariance, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(index, str(exc)) from None

    def log_pdf(self, x: np.ndarray, index: Optional[int] = None) -> np.ndarray:
        """Log normal density for the rows of ``x`` (shape ``(n, d)``)."""
        chol = self.cholesky(index)
        z = scipy.linalg.solve_triangular(chol, (x - self.mean).T, lower=True)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (self.dim * LOG_2PI + log_det + np.sum(z * z, axis=0))


@dataclass(frozen=True)
class GaussianMixture:
    """Weighted list of Gaussian components sharing one dimension.

    Weights must be non-negative and sum to one. Exact zeros only arise from
    tempering at very large ``beta`` (underflow) and are allowed.
    """

    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a mixture needs at least one component")
        d = comps[0].dim
        if any(c.dim != d for c in comps):
            raise ValueError("all components must share one dimension")
        w = np.asarray(self.weights, dtype=float).ravel().copy()
        if w.shape[0] != len(comps):
            raise ValueError(f"{w.shape[0]} weights for {len(comps)} components")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValueError("mixture weights must be finite and non-negative")
        total = w.sum()
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"mixture weights sum to {total!r}, expected 1")
        w = w / total
        w.setflags(write=False)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_arrays(cls, means, covariances, weights) -> "GaussianMixture":
        means = np.atleast_2d(np.asarray(means, dtype=float))
        covs = np.asarray(covariances, dtype=float)
        if covs.ndim == 2:
            covs = np.broadcast_to(covs, (means.shape[0],) + covs.shape)
        comps = tuple(GaussianComponent(m, c) for m, c in zip(means, covs))
        return cls(comps, weights)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def covariances(self) -> np.ndarray:
        return np.stack([c.covariance for c in self.components])

    def with_weights(self, weights) -> "GaussianMixture":
        return GaussianMixture(self.components, weights)

    def component_log_probs(self, x: np.ndarray) -> np.ndarray:
        """``log w_k + log N(x_i; mu_k, Sigma_k)`` as an ``(n, K)`` array."""
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        return np.stack(
            [comp.log_pdf(x, index=k) + log_w[k] for k, comp in enumerate(self.components)],
            axis=1,
        )


@dataclass(frozen=True)
class TemperedWeights:
    base_weights: np.ndarray
    beta: float
    tempered: np.ndarray
    log_tempered: np.ndarray


@dataclass
class Dataset:
    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] < 1:
            raise ValueError("a dataset needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("dataset rows must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.points.shape[0],):
                raise ValueError("labels must have one entry per point")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 500
    tol: float = 1e-6
    reg_eps: float = 1e-6
    n_restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not self.reg_eps > 0:
            raise ValueError("reg_eps must be > 0")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")


@dataclass
class EMTrace:
    """Per-iteration mean log-likelihood of one EM run.

    ``reseeded`` lists iterations whose M-step re-seeded a collapsed
    component; the likelihood may drop right after such a step.
    """

    log_likelihood: list = field(default_factory=list)
    reseeded: list = field(default_factory=list)
    converged: bool = False


def _as_points(m: GaussianMixture, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != m.dim:
        raise ValueError(f"expected points of dimension {m.dim}, got shape {np.shape(x)}")
    return arr, single


def log_density(m: GaussianMixture, x):
    """Mixture log-density at ``x``.

    ``x`` may be a single point of shape ``(d,)``, returning a float, or a
    batch of shape ``(n, d)``, returning an array.
    """
    pts, single = _as_points(m, x)
    out = logsumexp(m.component_log_probs(pts), axis=1)
    return float(out[0]) if single else out


def sample(m: GaussianMixture, n: int, seed) -> Dataset:
    """Draw ``n`` labelled points: a categorical component draw, then a
    Gaussian draw through the component's Cholesky factor."""
    if n < 1:
        raise ValueError("n must be >= 1")
    chols = [c.cholesky(index=k) for k, c in enumerate(m.components)]
    rng = np.random.default_rng(seed)
    labels = rng.choice(m.n_components, size=n, p=m.weights)
    z = rng.standard_normal((n, m.dim))
    points = np.empty((n, m.dim))
    for k, (comp, chol) in enumerate(zip(m.components, chols)):
        idx = labels == k
        points[idx] = comp.mean + z[idx] @ chol.T
    return Dataset(points, labels)


def temper_weights(w, beta: float) -> TemperedWeights:
    """Escort transform ``w**beta / sum(w**beta)`` evaluated in log space.

    ``beta`` is capped at ``MAX_BETA`` so that ``inf`` can be passed for the
    hard argmax limit. Exactly tied maxima share the mass.
    """
    w = np.asarray(w, dtype=float).ravel()
    if w.size == 0 or np.any(~(w > 0)):
        raise ValueError("all weights must be strictly positive")
    if not beta >= 1:
        raise ValueError(f"beta must be >= 1, got {beta!r}")
    beta = min(float(beta), MAX_BETA)
    scaled = beta * np.log(w)
    log_t = scaled - logsumexp(scaled)
    t = np.exp(log_t)
    t = t / t.sum()
    return TemperedWeights(base_weights=w, beta=beta, tempered=t, log_tempered=log_t)


def weight_entropy(w) -> float:
    w = np.asarray(w, dtype=float).ravel()
    nz = w[w > 0]
    return float(-np.sum(nz * np.log(nz)))


def gaussian_cross_entropy(a: GaussianComponent, b: GaussianComponent) -> float:
    """``E_{x~a}[log b(x)]`` in closed form."""
    if a.dim != b.dim:
        raise ValueError("components have different dimensions")
    chol_b = b.cholesky()
    d = a.dim
    log_det_b = 2.0 * np.sum(np.log(np.diag(chol_b)))
    # tr(B^-1 A) via the triangular solve L^-1 A L^-T
    half = scipy.linalg.solve_triangular(chol_b, a.covariance, lower=True)
    trace = np.trace(scipy.linalg.solve_triangular(chol_b, half.T, lower=True))
    z = scipy.linalg.solve_triangular(chol_b, a.mean - b.mean, lower=True)
    return float(-0.5 * (d * LOG_2PI + log_det_b + trace + z @ z))


def mixture_cross_entropy_bound(teacher: GaussianMixture, student: GaussianMixture) -> float:
    """Jensen lower bound on ``E_teacher[log student]``: the weighted sum of
    pairwise component cross-entropies."""
    if teacher.dim != student.dim:
        raise ValueError("mixtures have different dimensions")
    total = 0.0
    for wt, ct in zip(teacher.weights, teacher.components):
        for ws, cs in zip(student.weights, student.components):
            if wt > 0 and ws > 0:
                total += wt * ws * gaussian_cross_entropy(ct, cs)
    return float(total)


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[i] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def lloyd_refine(points: np.ndarray, centers: np.ndarray, max_iter: int = 50) -> np.ndarray:
    """Plain k-means iterations from the given centers; empty clusters keep
    their center."""
    centers = centers.copy()
    for _ in range(max_iter):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        new = centers.copy()
        for j in range(centers.shape[0]):
            members = labels == j
            if np.any(members):
                new[j] = points[members].mean(axis=0)
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


def _weighted_covariance(x: np.ndarray, resp: np.ndarray, mean: np.ndarray, nk: float) -> np.ndarray:
    diff = x - mean
    cov = (resp[:, None] * diff).T @ diff / nk
    return 0.5 * (cov + cov.T)


def _em_run(x: np.ndarray, k: int, cfg: FitConfig, rng: np.random.Generator):
    n, d = x.shape
    eye = np.eye(d)
    global_cov = np.atleast_2d(np.cov(x, rowvar=False, bias=True)) + cfg.reg_eps * eye
    means = lloyd_refine(x, kmeans_plus_plus(x, k, rng))
    covs = np.repeat(global_cov[None], k, axis=0)
    weights = np.full(k, 1.0 / k)
    trace = EMTrace()

    def log_probs():
        mix = GaussianMixture.from_arrays(means, covs, weights)
        return mix.component_log_probs(x)

    for it in range(cfg.max_iter):
        lp = log_probs()
        norm = logsumexp(lp, axis=1)
        trace.log_likelihood.append(float(norm.mean()))
        if it > 0 and abs(trace.log_likelihood[-1] - trace.log_likelihood[-2]) < cfg.tol:
            trace.converged = True
            break
        resp = np.exp(lp - norm[:, None])
        nk = resp.sum(axis=0)
        weights = nk / n
        collapsed = np.flatnonzero(weights < COLLAPSE_WEIGHT)
        for j in range(k):
            if j in collapsed:
                continue
            means[j] = resp[:, j] @ x / nk[j]
            covs[j] = _weighted_covariance(x, resp[:, j], means[j], nk[j]) + cfg.reg_eps * eye
        if collapsed.size:
            for j in collapsed:
                means[j] = x[rng.integers(n)]
                covs[j] = global_cov
                weights[j] = 1.0 / k
                logger.info("EM iteration %d: component %d collapsed, re-seeded at a data point", it, j)
            weights = weights / weights.sum()
            trace.reseeded.append(it + 1)
    mix = GaussianMixture.from_arrays(means, covs, weights)
    return mix, trace


def fit_em_trace(data, k: int, cfg: FitConfig = FitConfig()) -> tuple[GaussianMixture, EMTrace]:
    """Best-of-``n_restarts`` EM fit; also returns the winning run's trace."""
    x = data.points if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, dtype=float))
    if x.size == 0 or x.shape[0] == 0:
        raise ValueError("cannot fit an empty dataset")
    if k < 1:
        raise ValueError("k must be >= 1")
    n, d = x.shape
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if n < k * (d + 1):
        warnings.warn(f"only {n} points for {k} components in {d} dimensions", stacklevel=2)
    best = None
    for child in np.random.SeedSequence(cfg.seed).spawn(cfg.n_restarts):
        mix, trace = _em_run(x, k, cfg, np.random.default_rng(child))
        if best is None or trace.log_likelihood[-1] > best[1].log_likelihood[-1]:
            best = (mix, trace)
    return best


def fit_em(data, k: int, cfg: FitConfig = FitConfig()) -> GaussianMixture:
    return fit_em_trace(data, k, cfg)[0]


def grid_ground_truth(
    x_centers: Sequence[float] = (-3.0, -1.0, 1.0, 3.0),
    y_centers: Sequence[float] = (-0.5, 0.5),
    variance: float = 0.015,
    column_weights: Sequence[float] = (0.15, 0.26, 0.33, 0.24),
) -> GaussianMixture:
    """Rectangular grid of isotropic modes.

    ``column_weights`` gives the mass of each column of modes (normalized);
    it is split evenly between the modes of a column. Components are ordered
    column by column, bottom to top.
    """
    col = np.asarray(column_weights, dtype=float)
    col = col / col.sum()
    means = [[x, y] for x in x_centers for y in y_centers]
    weights = np.repeat(col / len(y_centers), len(y_centers))
    return GaussianMixture.from_arrays(means, variance * np.eye(2), weights)
