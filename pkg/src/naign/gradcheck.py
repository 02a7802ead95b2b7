"""Finite-difference checks of every loss gradient.

The oracles below are value-only surrogates built from ``forward`` alone: each
detached pass is evaluated with a frozen copy of the parameters, so central
differences over the live copy give exactly the gradient the losses claim.
"""
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .net import MlpArch, MlpParams, finite_diff_grads, forward
from .numerics import pairwise_distances, row_distances

LOSS_NAMES = ("rec", "idem", "idem_modified", "tight", "imle")


def surrogate_rec(live, frozen, batches, metric):
    x = batches["x"]
    return row_distances(x, forward(live, x), metric).mean()


def surrogate_idem(live, frozen, batches, metric):
    y = forward(live, batches["z"])
    return row_distances(y, forward(frozen, y), metric).mean()


def surrogate_idem_modified(live, frozen, batches, metric):
    q = forward(frozen, batches["z_gen"])
    yq = forward(live, q)
    base = surrogate_idem(live, frozen, batches, metric)
    return 0.5 * (base + row_distances(yq, forward(frozen, yq), metric).mean())


def surrogate_tight(live, frozen, batches, metric):
    y = forward(frozen, batches["z"])
    return -row_distances(y, forward(live, y), metric).mean()


def surrogate_imle(live, frozen, batches, metric):
    """IMLE with the matching fixed at the frozen parameters' argmin."""
    x, zc = batches["x"], batches["zc"]
    matched = pairwise_distances(x, forward(frozen, zc), metric).argmin(axis=1)
    return row_distances(x, forward(live, zc[matched]), metric).mean()


SURROGATES = {
    "rec": surrogate_rec,
    "idem": surrogate_idem,
    "idem_modified": surrogate_idem_modified,
    "tight": surrogate_tight,
    "imle": surrogate_imle,
}


def analytic(name, params, batches, metric):
    if name == "rec":
        return losses.rec_loss(params, batches["x"], metric)
    if name == "idem":
        return losses.idem_loss(params, batches["z"], metric)
    if name == "idem_modified":
        return losses.idem_loss(params, batches["z"], metric, True, batches["z_gen"])
    if name == "tight":
        return losses.tight_loss(params, batches["z"], metric)
    if name == "imle":
        value, grads, _ = losses.imle_loss(params, batches["x"], batches["zc"], metric)
        return value, grads
    raise ValueError(f"unknown loss {name!r}")


def random_net(dims, seed, activation="leaky_relu"):
    """float64 net with random weights and non-zero biases."""
    rng = np.random.default_rng(seed)
    arch = MlpArch(input_dim=dims[0], hidden_dims=tuple(dims[1:-1]), activation=activation)
    ws, bs = [], []
    for a, b in zip(arch.layer_dims[:-1], arch.layer_dims[1:]):
        ws.append(rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)))
        bs.append(rng.normal(0.0, 0.1, size=b))
    return MlpParams(arch, ws, bs)


def random_batches(dim, seed, n=8, m=32):
    rng = np.random.default_rng(seed)
    return {"x": rng.normal(size=(n, dim)), "z": rng.normal(size=(n, dim)),
            "z_gen": rng.normal(size=(n, dim)), "zc": rng.normal(size=(m, dim))}


def relative_errors(a, f, floor=1e-6):
    """Per-parameter |a - f| / |f| over entries where either magnitude exceeds ``floor``."""
    a, f = a.flat(), f.flat()
    sel = (np.abs(a) > floor) | (np.abs(f) > floor)
    if not sel.any():
        return np.zeros(0)
    return np.abs(a[sel] - f[sel]) / np.maximum(np.abs(f[sel]), np.abs(a[sel]))


@dataclass
class GradCheckReport:
    worst: dict = field(default_factory=dict)  # loss name -> worst relative error
    tolerance: float = 1e-4

    @property
    def passed(self):
        return all(v <= self.tolerance for v in self.worst.values())

    @property
    def worst_overall(self):
        return max(self.worst.values()) if self.worst else 0.0


def check_loss(name, params, batches, metric="l2", h=1e-4, corrupt=False, order=4):
    """Worst per-parameter relative error between analytic and finite-difference gradients."""
    frozen = params.astype(np.float64)
    _, grads = analytic(name, frozen, batches, metric)
    if corrupt:
        grads.weights[0] = grads.weights[0] * 1.01 + 1e-3
    fd = finite_diff_grads(frozen, lambda p: SURROGATES[name](p, frozen, batches, metric), h, order)
    errs = relative_errors(grads, fd)
    return float(errs.max()) if errs.size else 0.0


def run_grad_check(dims=(2, 8, 8, 2), trials=20, tolerance=1e-4, seed=0, metric="l2",
                   activation="tanh", h=1e-4, corrupt=False, names=LOSS_NAMES, order=4):
    report = GradCheckReport(tolerance=tolerance)
    for trial in range(trials):
        params = random_net(dims, seed + trial, activation)
        batches = random_batches(dims[0], 10_000 + seed + trial)
        for name in names:
            err = check_loss(name, params, batches, metric, h, corrupt, order)
            report.worst[name] = max(report.worst.get(name, 0.0), err)
    return report
