"""Drift, manifold distance, energy and density fields over 2-D grids."""
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import MOON_ARCS
from .net import FixedMap, MlpParams, forward
from .numerics import as_matrix, pairwise_distances, row_distances

FIELD_KINDS = ("drift", "distance", "energy", "density")
DEFAULT_K = 2.0
_TINY = np.finfo(np.float64).tiny


@dataclass
class FieldGrid:
    bbox: tuple
    resolution: tuple
    values: np.ndarray  # (nx, ny), values[i, j] at (x_i, y_j)
    kind: str

    def points(self):
        return grid_points(self.bbox, self.resolution)

    def to_csv(self, path):
        pts = self.points()
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "value"])
            for (x, y), v in zip(pts, self.values.ravel()):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


@dataclass
class ProjectionMap:
    sources: np.ndarray
    targets: np.ndarray
    norms: np.ndarray

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sx", "sy", "tx", "ty", "norm"])
            for s, t, n in zip(self.sources, self.targets, self.norms):
                w.writerow([repr(float(v)) for v in (*s, *t, n)])


def drift(params, points, metric="l2"):
    z = as_matrix(points, "points")
    return row_distances(z, forward(params, z), metric)


def _arc_distance(p, center, lo, hi, radius=1.0):
    rel = p - np.asarray(center)
    r = np.hypot(rel[:, 0], rel[:, 1])
    ang = np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2.0 * math.pi)
    on_span = (ang >= lo) & (ang <= hi)
    # the 0/2pi seam: an arc ending at 2pi also contains angle 0
    if hi >= 2.0 * math.pi:
        on_span |= ang == 0.0
    ends = np.array([[center[0] + radius * math.cos(a), center[1] + radius * math.sin(a)]
                     for a in (lo, hi)])
    end_d = pairwise_distances(p, ends, "l2").min(axis=1)
    return np.where(on_span, np.abs(r - radius), end_d)


def moons_distance(points):
    p = as_matrix(points, "points")
    return np.minimum(*[_arc_distance(p, c, lo, hi) for c, lo, hi in MOON_ARCS])


def manifold_distance_oracle(points, dataset, analytic=False):
    """Brute-force distance to the manifold proxy.

    Default: nearest dataset point. ``analytic``: the arcs for 2moons, the mode
    centers for Gaussian mixtures.
    """
    p = as_matrix(points, "points")
    if analytic:
        if dataset.name == "2moons":
            return moons_distance(p)
        if dataset.mode_centers is None:
            raise ValueError(f"no analytic manifold known for dataset {dataset.name!r}")
        ref = dataset.mode_centers
    else:
        ref = dataset.points
    if ref.shape[0] == 0:
        raise ValueError("empty dataset")
    out = np.empty(p.shape[0])
    for start in range(0, p.shape[0], 4096):
        out[start:start + 4096] = pairwise_distances(p[start:start + 4096], ref, "l2").min(axis=1)
    return out


def energy(drift_values, k=DEFAULT_K):
    """E = exp(k * drift) - 1."""
    if k <= 0:
        raise ValueError("k must be positive")
    d = np.asarray(drift_values, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("drift values must be non-negative")
    # the literal form (not expm1) keeps density grids bit-reproducible from the closed form
    with np.errstate(over="ignore"):  # huge drift saturates to inf, density to the floor
        return np.exp(k * d) - 1.0


def unnorm_density(energy_values):
    """exp(-E), floored at the smallest positive double so it never reaches 0."""
    e = np.asarray(energy_values, dtype=np.float64)
    if np.any(e < 0):
        raise ValueError("energy values must be non-negative")
    return np.maximum(np.exp(-e), _TINY)


def grid_points(bbox, resolution):
    xmin, xmax, ymin, ymax = bbox
    nx, ny = resolution
    xs = xmin + (np.arange(nx) + 0.5) * (xmax - xmin) / nx
    ys = ymin + (np.arange(ny) + 0.5) * (ymax - ymin) / ny
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def grid_eval(source, bbox, resolution, kind="drift", k=DEFAULT_K, metric="l2"):
    """Evaluate a field at the cell centres of a regular grid.

    ``source`` is either model params (base field: drift) or a callable mapping
    points to distances (base field: that distance, e.g. the true manifold distance).
    """
    xmin, xmax, ymin, ymax = bbox
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"invalid bbox {bbox}")
    nx, ny = resolution
    if nx < 2 or ny < 2:
        raise ValueError("resolution must be at least 2x2")
    if kind not in FIELD_KINDS:
        raise ValueError(f"unknown field kind {kind!r}")
    pts = grid_points(bbox, resolution)
    if isinstance(source, (MlpParams, FixedMap)):
        base = drift(source, pts, metric)
    else:
        base = np.asarray(source(pts), dtype=np.float64)
    if kind in ("drift", "distance"):
        values = base
    elif kind == "energy":
        values = energy(base, k)
    else:
        values = unnorm_density(energy(base, k))
    return FieldGrid(tuple(float(v) for v in bbox), (int(nx), int(ny)),
                     values.reshape(nx, ny), kind)


def projection_map(params, points, metric="l2"):
    if params.arch.input_dim != 2:
        raise ValueError("projection maps need a 2-D model")
    src = as_matrix(points, "points")
    tgt = forward(params, src)
    return ProjectionMap(src, tgt, row_distances(src, tgt, metric))


# --- SVG ---------------------------------------------------------------------

_VIRIDIS = np.array([
    [68, 1, 84], [72, 40, 120], [62, 74, 137], [49, 104, 142], [38, 130, 142],
    [31, 158, 137], [53, 183, 121], [109, 205, 89], [180, 222, 44], [253, 231, 37],
], dtype=np.float64)


def _color(t, cmap):
    t = min(max(t, 0.0), 1.0)
    if cmap == "gray":
        v = int(round(255 * t))
        return f"#{v:02x}{v:02x}{v:02x}"
    pos = t * (len(_VIRIDIS) - 1)
    i = min(int(pos), len(_VIRIDIS) - 2)
    c = _VIRIDIS[i] + (pos - i) * (_VIRIDIS[i + 1] - _VIRIDIS[i])
    r, g, b = (int(round(x)) for x in c)
    return f"#{r:02x}{g:02x}{b:02x}"


def _svg_doc(width, height, body):
    head = ('<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">\n')
    return head + "\n".join(body) + "\n</svg>\n"


def heatmap_svg(grid, cmap="viridis", size=400):
    nx, ny = grid.resolution
    lo, hi = float(grid.values.min()), float(grid.values.max())
    span = hi - lo
    cw, ch = size / nx, size / ny
    body = []
    for i in range(nx):
        for j in range(ny):
            t = 0.0 if span == 0 else (grid.values[i, j] - lo) / span
            # row 0 of the picture is the top (largest y)
            body.append(f'<rect x="{i * cw:.4f}" y="{(ny - 1 - j) * ch:.4f}" '
                        f'width="{cw:.4f}" height="{ch:.4f}" fill="{_color(t, cmap)}"/>')
    steps = 20
    for s in range(steps):
        body.append(f'<rect x="{size + 10}" y="{size - (s + 1) * size / steps:.4f}" width="20" '
                    f'height="{size / steps:.4f}" fill="{_color(s / (steps - 1), cmap)}"/>')
    body.append(f'<text x="{size + 35}" y="12" font-size="11" class="legend-max">'
                f'max={hi:.6g}</text>')
    body.append(f'<text x="{size + 35}" y="{size}" font-size="11" class="legend-min">'
                f'min={lo:.6g}</text>')
    body.append(f'<text x="4" y="{size + 16}" font-size="11">{grid.kind}</text>')
    return _svg_doc(size + 110, size + 24, body)


def projection_svg(pmap, size=400, margin=0.1):
    pts = np.concatenate([pmap.sources, pmap.targets])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    lo = lo - margin * span
    span = span * (1 + 2 * margin)

    def xy(p):
        return (p[0] - lo[0]) / span[0] * size, size - (p[1] - lo[1]) / span[1] * size

    body = ['<defs><marker id="head" markerWidth="6" markerHeight="6" refX="5" refY="3" '
            'orient="auto"><path d="M0,0 L6,3 L0,6 z" fill="#2a9d3a"/></marker></defs>']
    for s, t in zip(pmap.sources, pmap.targets):
        sx, sy = xy(s)
        tx, ty = xy(t)
        body.append(f'<line x1="{sx:.3f}" y1="{sy:.3f}" x2="{tx:.3f}" y2="{ty:.3f}" '
                    'stroke="#2a9d3a" stroke-width="0.8" marker-end="url(#head)"/>')
    for s in pmap.sources:
        sx, sy = xy(s)
        body.append(f'<circle cx="{sx:.3f}" cy="{sy:.3f}" r="1.5" fill="#d62828"/>')
    return _svg_doc(size, size, body)


def render_svg(obj, path, cmap="viridis"):
    if isinstance(obj, FieldGrid):
        text = heatmap_svg(obj, cmap)
    elif isinstance(obj, ProjectionMap):
        text = projection_svg(obj)
    else:
        raise TypeError(f"cannot render {type(obj).__name__}")
    Path(path).write_text(text)
    return text
