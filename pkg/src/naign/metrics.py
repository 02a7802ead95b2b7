"""Generation and restoration metrics."""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import as_matrix, fit_gaussian, knn_radii, pairwise_distances, spd_sqrt

_CHUNK = 1024


@dataclass
class GenEvalReport:
    fld: float
    coverage: float
    density: float
    n_real: int
    n_gen: int
    k: int
    feature_map: str

    def to_dict(self):
        return asdict(self)


@dataclass
class ModeReport:
    hits: list
    covered_modes: int
    collapse_entropy: float
    n_modes: int

    def to_dict(self):
        return asdict(self)


def mae(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def coverage_density(real, gen, k=5):
    """k-NN ball Coverage and Density of ``gen`` against ``real``."""
    real = as_matrix(real, "real")
    gen = as_matrix(gen, "gen")
    n, m = real.shape[0], gen.shape[0]
    if m < 1:
        raise ValueError("need at least one generated point")
    if k >= n:
        raise ValueError(f"k must be < number of real points (k={k}, N={n})")
    radii = knn_radii(real, k)
    covered = np.zeros(n, dtype=bool)
    inside = 0
    for start in range(0, n, _CHUNK):
        d = pairwise_distances(real[start:start + _CHUNK], gen, "l2")
        within = d <= radii[start:start + _CHUNK, None]
        covered[start:start + _CHUNK] = within.any(axis=1)
        inside += int(within.sum())
    return float(covered.mean()), inside / (k * m)


def frechet_distance(a, b):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}) between two GaussianStats.

    The trace of the product root is taken as Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}),
    which has the same eigenvalues as (S_a S_b)^{1/2} but is symmetric PSD.
    """
    diff = a.mean - b.mean
    root_a = spd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    inner = 0.5 * (inner + inner.T)
    tr_root = np.trace(spd_sqrt(inner))
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_root)


def fld(real_feats, gen_feats):
    return frechet_distance(fit_gaussian(real_feats), fit_gaussian(gen_feats))


class PcaFeatures:
    """Linear projection onto the top principal directions of a reference set."""

    def __init__(self, reference, n_components=64):
        ref = as_matrix(reference, "reference")
        self.mean = ref.mean(axis=0)
        _, _, vt = np.linalg.svd(ref - self.mean, full_matrices=False)
        self.components = vt[:min(n_components, vt.shape[0])]
        # fix the sign of each direction so the map is deterministic across LAPACK builds
        signs = np.sign(self.components[np.arange(len(self.components)),
                                        np.abs(self.components).argmax(axis=1)])
        self.components *= signs[:, None]
        self.name = f"pca{self.components.shape[0]}"

    def __call__(self, x):
        return (as_matrix(x) - self.mean) @ self.components.T


def feature_map_for(real, pca_dim=64):
    """Identity on low-dimensional data, PCA fit on ``real`` otherwise."""
    real = as_matrix(real)
    if real.shape[1] <= 2:
        return (lambda x: as_matrix(x)), "identity"
    pca = PcaFeatures(real, pca_dim)
    return pca, pca.name


def evaluate_generation(real, gen, k=5, pca_dim=64):
    fmap, name = feature_map_for(real, pca_dim)
    cov, dens = coverage_density(real, gen, k)
    return GenEvalReport(fld=fld(fmap(real), fmap(gen)), coverage=cov, density=dens,
                         n_real=int(as_matrix(real).shape[0]), n_gen=int(as_matrix(gen).shape[0]),
                         k=k, feature_map=name)


def mode_coverage(gen, centers, radius_multiplier=3.0, sigma=0.1):
    centers = as_matrix(centers, "centers")
    if centers.shape[0] == 0:
        raise ValueError("need at least one mode center")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    gen = as_matrix(gen, "gen")
    d = pairwise_distances(gen, centers, "l2")
    nearest = d.argmin(axis=1)
    hits = np.bincount(nearest, minlength=centers.shape[0])
    covered = (d <= radius_multiplier * sigma).any(axis=0)
    p = hits[hits > 0] / hits.sum() if hits.sum() else np.array([])
    entropy = float(-(p * np.log(p)).sum()) if p.size else 0.0
    return ModeReport(hits=hits.tolist(), covered_modes=int(covered.sum()),
                      collapse_entropy=entropy, n_modes=int(centers.shape[0]))


def table_csv(rows, columns):
    """Method-by-metric CSV table. ``rows`` maps a method label to a dict of metric values."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", *columns])
    for label, values in rows.items():
        w.writerow([label, *[_fmt(values.get(c)) for c in columns]])
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def report_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
