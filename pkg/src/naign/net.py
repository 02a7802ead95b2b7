"""A plain MLP ``f: R^D -> R^D`` with hand-written reverse-mode gradients.

Parameters are stored in float32; every forward/backward pass runs in float64.
"""
from dataclasses import dataclass, field, replace
from types import SimpleNamespace

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh")


@dataclass(frozen=True)
class MlpArch:
    input_dim: int
    hidden_dims: tuple = (512, 512, 512)
    activation: str = "leaky_relu"
    slope: float = 0.01
    residual_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError("hidden_dims must be a non-empty list of positive sizes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.input_dim)

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "slope": self.slope,
            "residual_output": self.residual_output,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d.get("hidden_dims", (512, 512, 512))),
            activation=d.get("activation", "leaky_relu"),
            slope=float(d.get("slope", 0.01)),
            residual_output=bool(d.get("residual_output", False)),
        )


@dataclass
class MlpParams:
    arch: MlpArch
    weights: list  # (fan_in, fan_out) per layer
    biases: list

    def __post_init__(self):
        dims = self.arch.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("number of layers does not match arch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} has shapes {w.shape}/{b.shape}, expected "
                                 f"{(dims[i], dims[i + 1])}/{(dims[i + 1],)}")

    @property
    def param_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def tensors(self):
        """Flat list [W0, b0, W1, b1, ...]; the canonical tensor order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def astype(self, dtype):
        return MlpParams(self.arch,
                         [w.astype(dtype, copy=True) for w in self.weights],
                         [b.astype(dtype, copy=True) for b in self.biases])

    def copy(self):
        return self.astype(self.weights[0].dtype)

    def flat(self):
        return np.concatenate([t.ravel() for t in self.tensors()]).astype(np.float64)

    def with_flat(self, vec):
        """New float64 params taking values from a flat vector in tensor order."""
        vec = np.asarray(vec, dtype=np.float64)
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos:pos + w.size].reshape(w.shape)); pos += w.size
            bs.append(vec[pos:pos + b.size].reshape(b.shape)); pos += b.size
        if pos != vec.size:
            raise ValueError("flat vector length does not match parameter count")
        return MlpParams(self.arch, ws, bs)

    def all_finite(self):
        return all(np.all(np.isfinite(t)) for t in self.tensors())


@dataclass
class GradientSet:
    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros(w.shape) for w in params.weights],
                   [np.zeros(b.shape) for b in params.biases])

    def tensors(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self):
        return np.concatenate([t.ravel() for t in self.tensors()])

    def __add__(self, other):
        return GradientSet([a + b for a, b in zip(self.weights, other.weights)],
                           [a + b for a, b in zip(self.biases, other.biases)])

    def scale(self, s):
        return GradientSet([s * w for w in self.weights], [s * b for b in self.biases])

    def all_finite(self):
        return all(np.all(np.isfinite(t)) for t in self.tensors())


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)  # input to each layer
    pre: list = field(default_factory=list)  # pre-activation of each hidden layer

    def take(self, rows):
        """Cache restricted to a subset (or repetition) of batch rows."""
        return ForwardCache([a[rows] for a in self.inputs], [p[rows] for p in self.pre])


def init_mlp(arch, seed):
    """Uniform He initialization: U(-a, a) with a = sqrt(6 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    dims = arch.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return MlpParams(arch, weights, biases)


def _act(arch, x):
    if arch.activation == "relu":
        return np.maximum(x, 0.0)
    if arch.activation == "leaky_relu":
        if 0.0 <= arch.slope <= 1.0:
            return np.maximum(x, arch.slope * x)
        return np.where(x > 0.0, x, arch.slope * x)
    return np.tanh(x)


def _act_grad(arch, pre, g):
    if arch.activation == "relu":
        return g * (pre > 0.0)
    if arch.activation == "leaky_relu":
        scale = (pre > 0.0) * (1.0 - arch.slope)
        scale += arch.slope
        return g * scale
    t = np.tanh(pre)
    return g * (1.0 - t * t)


class FixedMap:
    """A parameter-free map ``R^D -> R^D`` accepted wherever params are.

    It has no parameters, so every gradient it produces is empty; used for
    analytic reference maps such as exact projectors.
    """

    def __init__(self, fn, input_dim):
        self.fn = fn
        self.arch = SimpleNamespace(input_dim=int(input_dim), residual_output=False)
        self.weights = []
        self.biases = []

    def __call__(self, batch):
        return self.fn(batch)


def _check_batch(params, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.arch.input_dim:
        raise ValueError(f"batch shape {batch.shape} does not match input_dim "
                         f"{params.arch.input_dim}")
    return batch


def forward_cached(params, batch):
    x = _check_batch(params, batch)
    if isinstance(params, FixedMap):
        return np.asarray(params.fn(x), dtype=np.float64), ForwardCache([x], [])
    arch = params.arch
    cache = ForwardCache()
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w.astype(np.float64) + b.astype(np.float64)
        if i < last:
            cache.pre.append(z)
            h = _act(arch, z)
        else:
            h = z
    if arch.residual_output:
        h = h + x
    return h, cache


def forward(params, batch):
    return forward_cached(params, batch)[0]


def backward(params, cache, output_grad, param_grads=True):
    """Pull ``output_grad`` back through a cached pass.

    Returns ``(grads, input_grad)``; ``grads`` is None when ``param_grads`` is
    false, which is how detached (stop-gradient) passes are differentiated
    with respect to their input only.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if isinstance(params, FixedMap):
        return (GradientSet([], []) if param_grads else None), np.zeros_like(g)
    arch = params.arch
    n_layers = len(params.weights)
    if g.shape != (cache.inputs[0].shape[0], arch.input_dim):
        raise ValueError(f"output_grad shape {g.shape} does not match output shape")
    dws, dbs = [None] * n_layers, [None] * n_layers
    residual_g = g if arch.residual_output else None
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = _act_grad(arch, cache.pre[i], g)
        if param_grads:
            dws[i] = cache.inputs[i].T @ g
            dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i].astype(np.float64).T
    if residual_g is not None:
        g = g + residual_g
    grads = GradientSet(dws, dbs) if param_grads else None
    return grads, g


def forward_backward(params, batch, output_grad):
    """Output of the net and the gradient of <output, output_grad> w.r.t. every parameter."""
    out, cache = forward_cached(params, batch)
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != out.shape:
        raise ValueError(f"output_grad shape {output_grad.shape} != output shape {out.shape}")
    grads, _ = backward(params, cache, output_grad)
    return out, grads


def finite_diff_grads(params, loss_closure, h=1e-4, order=4):
    """Central-difference estimate of d loss / d theta, one scalar parameter at a time.

    ``order=2`` is the three-point stencil; ``order=4`` the five-point stencil
    (same step ``h``, truncation error O(h^4)). ``loss_closure`` receives
    float64 params and returns a scalar. Intended as a test oracle on small nets.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if order == 2:
        pairs = ((1.0, 1.0),)  # (offset, weight) of each symmetric difference
        denom = 2.0 * h
    elif order == 4:
        pairs = ((1.0, 8.0), (2.0, -1.0))
        denom = 12.0 * h
    else:
        raise ValueError("order must be 2 or 4")
    base = params.flat()
    out = np.empty_like(base)

    def at(vec, i, x):
        vec[i] = x
        return float(loss_closure(params.with_flat(vec)))

    for i in range(base.size):
        step = base.copy()
        acc = 0.0
        for offset, weight in pairs:
            acc += weight * (at(step, i, base[i] + offset * h) - at(step, i, base[i] - offset * h))
        out[i] = acc / denom
    flat_grads = params.with_flat(out)
    return GradientSet(flat_grads.weights, flat_grads.biases)


def replace_arch(params, **changes):
    return MlpParams(replace(params.arch, **changes), params.weights, params.biases)
