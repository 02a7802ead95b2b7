"""Dense linear algebra and statistics helpers shared by the model, metrics and fields."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

METRICS = ("l1", "l2", "sql2")
_CHUNK = 1024


class DegenerateSampleError(ValueError):
    pass


class InvalidMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self):
        return self.mean.shape[0]


def as_matrix(a, name="array"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def fit_gaussian(samples):
    x = as_matrix(samples, "samples")
    n = x.shape[0]
    if n < 2:
        raise DegenerateSampleError(f"need at least 2 samples to fit a Gaussian, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mean=mean, cov=cov)


def spd_sqrt(a, tol=1e-8):
    """Principal square root of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues in [-tol*(1+max|a|), 0) are clamped to zero; anything more
    negative, or an asymmetry above the same tolerance, raises InvalidMatrixError.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidMatrixError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidMatrixError("matrix has non-finite entries")
    scale = 1.0 + (np.abs(a).max() if a.size else 0.0)
    if np.abs(a - a.T).max(initial=0.0) > tol * scale:
        raise InvalidMatrixError("matrix is not symmetric")
    evals, evecs = np.linalg.eigh(0.5 * (a + a.T))
    if evals.size and evals.min() < -tol * scale:
        raise InvalidMatrixError(f"matrix is indefinite (min eigenvalue {evals.min():.3e})")
    root = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    return 0.5 * (root + root.T)


def pairwise_distances(a, b, metric="l2"):
    """(N, M) matrix of distances between the rows of `a` and `b`.

    `sql2` is the squared Euclidean distance; it is not a metric but is offered
    as a loss option.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if metric == "l2":
        return cdist(a, b, "euclidean")
    if metric == "l1":
        return cdist(a, b, "cityblock")
    if metric == "sql2":
        return cdist(a, b, "sqeuclidean")
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def row_distances(a, b, metric="l2"):
    """Distance between matching rows of two equally-shaped batches."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return distance_of_difference(diff, metric)


def distance_of_difference(diff, metric):
    if metric == "l2":
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if metric == "l1":
        return np.abs(diff).sum(axis=1)
    if metric == "sql2":
        return np.einsum("ij,ij->i", diff, diff)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def distance_grad(diff, metric):
    """Gradient of the row distance ``d(diff)`` with respect to ``diff``.

    The Euclidean norm is not differentiable at zero; the zero subgradient is used there.
    """
    if metric == "l2":
        norm = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        safe = np.where(norm > 0.0, norm, 1.0)
        return np.where(norm[:, None] > 0.0, diff / safe[:, None], 0.0)
    if metric == "l1":
        return np.sign(diff)
    if metric == "sql2":
        return 2.0 * diff
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def knn_radii(points, k):
    """Distance from every point to its k-th nearest other point (Euclidean)."""
    x = as_matrix(points, "points")
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    radii = np.empty(n)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        d = pairwise_distances(x[start:stop], x, "l2")
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        # k-th smallest among the N-1 others; the self entry sorts last
        radii[start:stop] = np.partition(d, k - 1, axis=1)[:, k - 1]
    return radii


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        return 0.0
    return float((a * b).sum() / denom)
