"""NAIGN and IGN loss terms with their stop-gradient contracts.

Every loss returns its value together with the exact gradient with respect to
the live parameters. A *detached* pass uses the same parameters but receives
no parameter gradient; gradients still flow through it to its input.
"""
from dataclasses import dataclass, field

import numpy as np

from .net import GradientSet, backward, forward, forward_cached
from .numerics import distance_grad, distance_of_difference, pairwise_distances


@dataclass(frozen=True)
class LossWeights:
    w_rec: float = 1.0
    w_idem: float = 1.0
    w_tight: float = 0.1
    w_imle: float = 1.0

    def __post_init__(self):
        if not all(np.isfinite([self.w_rec, self.w_idem, self.w_tight, self.w_imle])):
            raise ValueError("loss weights must be finite")


NAIGN_WEIGHTS = LossWeights(w_rec=1.0, w_idem=1.0, w_tight=0.0, w_imle=1.0)


@dataclass
class LossBreakdown:
    rec: float = 0.0
    imle: float = 0.0
    idem: float = 0.0
    tight: float = 0.0
    total: float = 0.0
    matched_indices: np.ndarray = None
    grads: GradientSet = None
    candidate_forwards: int = 0
    replayed: bool = False
    extras: dict = field(default_factory=dict)

    def record(self):
        return {"rec": self.rec, "imle": self.imle, "idem": self.idem,
                "tight": self.tight, "total": self.total}


def _nonempty(batch, what):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError(f"{what} must be a non-empty N x D batch")
    return batch


def rec_loss(params, x_batch, metric="l2"):
    x = _nonempty(x_batch, "x_batch")
    out, cache = forward_cached(params, x)
    diff = out - x
    value = float(distance_of_difference(diff, metric).mean())
    grads, _ = backward(params, cache, distance_grad(diff, metric) / x.shape[0])
    return value, grads


def _idem_term(params, z, metric):
    """mean d(f(z), f_detached(f(z))) and its gradient."""
    y, cache_inner = forward_cached(params, z)
    y2, cache_outer = forward_cached(params, y)
    diff = y - y2
    value = float(distance_of_difference(diff, metric).mean())
    g = distance_grad(diff, metric) / z.shape[0]
    # the outer pass is detached: no parameter gradient, but it still carries
    # the gradient back to its input f(z)
    _, g_through_outer = backward(params, cache_outer, -g, param_grads=False)
    grads, _ = backward(params, cache_inner, g + g_through_outer)
    return value, grads


def idem_loss(params, z_batch, metric="l2", also_on_generated=False, z_gen_batch=None):
    """Idempotency loss; with ``also_on_generated`` the averaged variant that also
    applies the term to generated points q = f_detached(z').

    ``z_gen_batch`` holds the fresh prior samples z'; when omitted the z batch is reused.
    """
    z = _nonempty(z_batch, "z_batch")
    value, grads = _idem_term(params, z, metric)
    if not also_on_generated:
        return value, grads
    z_gen = z if z_gen_batch is None else _nonempty(z_gen_batch, "z_gen_batch")
    q = forward(params, z_gen)  # detached generation; q is a constant
    value_q, grads_q = _idem_term(params, q, metric)
    return 0.5 * (value + value_q), (grads + grads_q).scale(0.5)


def tight_loss(params, z_batch, metric="l2"):
    """-mean d(f_detached(z), f(f_detached(z))); only the outer pass is differentiated."""
    z = _nonempty(z_batch, "z_batch")
    y = forward(params, z)  # detached inner pass
    y2, cache = forward_cached(params, y)
    diff = y - y2
    value = -float(distance_of_difference(diff, metric).mean())
    # d/dy2 of -d(y - y2) = +grad_d(diff)
    grads, _ = backward(params, cache, distance_grad(diff, metric) / z.shape[0])
    return value, grads


def chamfer_one_sided(a, b, metric="l2"):
    """sum over rows of `a` of the distance to the nearest row of `b`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] == 0:
        raise ValueError("chamfer distance needs a non-empty target set")
    if a.shape[0] == 0:
        return 0.0
    d = pairwise_distances(a, b, metric)
    return float(d.min(axis=1).sum())


def imle_loss(params, x_batch, z_candidates, metric="l2"):
    """(1/N) sum_i min_j d(x_i, f(z_j)).

    Candidates are pushed through the net once; the gradient flows only through
    the candidate matched to each datum (lowest index on ties).
    Returns ``(value, grads, matched_indices)``.
    """
    x = _nonempty(x_batch, "x_batch")
    zc = np.asarray(z_candidates, dtype=np.float64)
    if zc.ndim != 2 or zc.shape[0] == 0:
        raise ValueError("imle_loss needs at least one candidate")
    gen, cache = forward_cached(params, zc)
    d = pairwise_distances(x, gen, metric)
    matched = np.argmin(d, axis=1)
    n = x.shape[0]
    value = float(d[np.arange(n), matched].sum()) / n
    diff = gen[matched] - x
    grads, _ = backward(params, cache.take(matched), distance_grad(diff, metric) / n)
    return value, grads, matched


def paired_imle_loss(params, x_batch, z_star, metric="l2"):
    """IMLE term on stored (x, z*) pairs: one candidate per datum, no search."""
    x = _nonempty(x_batch, "x_batch")
    gen, cache = forward_cached(params, z_star)
    diff = gen - x
    value = float(distance_of_difference(diff, metric).mean())
    grads, _ = backward(params, cache, distance_grad(diff, metric) / x.shape[0])
    return value, grads


def _combine(terms, params):
    """Weighted sum of (name, weight, value, grads) terms into a LossBreakdown."""
    out = LossBreakdown()
    total_grads = GradientSet.zeros_like(params)
    total = 0.0
    for name, weight, value, grads in terms:
        setattr(out, name, value)
        if weight == 0.0 or grads is None:
            continue
        total += weight * value
        total_grads = total_grads + grads.scale(weight)
    out.total = total
    out.grads = total_grads
    return out


def ign_total(params, x_batch, z_batch, weights=LossWeights(), metric="l2"):
    """w_rec*rec + w_idem*idem + w_tight*tight with the original (non-averaged) idem term."""
    terms = []
    for name, w, fn, batch in (("rec", weights.w_rec, rec_loss, x_batch),
                               ("idem", weights.w_idem, idem_loss, z_batch),
                               ("tight", weights.w_tight, tight_loss, z_batch)):
        if w == 0.0:
            terms.append((name, w, 0.0, None))
        else:
            terms.append((name, w, *fn(params, batch, metric)))
    return _combine(terms, params)


def naign_total(params, x_batch, z_candidates, z_idem_batch, metric="l2", include_idem=True,
                z_gen_batch=None, weights=NAIGN_WEIGHTS):
    """rec + imle (+ averaged idem when ``include_idem``); include_idem=False is NAIGN^-."""
    rec = rec_loss(params, x_batch, metric)
    imle_value, imle_grads, matched = imle_loss(params, x_batch, z_candidates, metric)
    terms = [("rec", weights.w_rec, *rec), ("imle", weights.w_imle, imle_value, imle_grads)]
    if include_idem:
        terms.append(("idem", weights.w_idem,
                      *idem_loss(params, z_idem_batch, metric, True, z_gen_batch)))
    out = _combine(terms, params)
    out.matched_indices = matched
    out.candidate_forwards = int(np.asarray(z_candidates).shape[0])
    return out
