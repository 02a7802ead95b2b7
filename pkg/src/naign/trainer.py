"""Training loop for NAIGN, NAIGN^- and the IGN baseline."""
import hashlib
import json
import logging
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import datasets as ds
from .losses import (LossBreakdown, LossWeights, idem_loss, ign_total, imle_loss,
                     paired_imle_loss, rec_loss, _combine)
from .net import MlpArch, MlpParams, init_mlp

log = logging.getLogger(__name__)

METHODS = ("naign", "naign_minus", "ign")
CKPT_MAGIC = b"NAIG"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, last_good):
        super().__init__(msg)
        self.last_good = last_good


# --- config ------------------------------------------------------------------

@dataclass
class TrainConfig:
    method: str
    dataset: dict
    steps: int
    arch: MlpArch = None
    metric: str = "l2"
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 512
    imle_M: int = None
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    replay_prob: float = 0.5
    buffer_capacity: int = 10_000
    warm_start_steps: int = 0
    prior: str = "standard_normal"
    log_every: int = 100
    eval_every: int = 0
    checkpoint_every: int = 0
    mode: str = "strict"

    REQUIRED = ("method", "dataset", "steps")

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: expected one of {METHODS}, got {self.method!r}")
        if not isinstance(self.dataset, dict) or "name" not in self.dataset:
            raise ConfigError("dataset: must be an object with a 'name' field")
        if self.imle_M is None:
            self.imle_M = 10 * self.batch_size
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.arch, dict):
            self.arch = MlpArch.from_dict(self.arch)
        checks = [
            (self.lr > 0, "lr: must be > 0"),
            (self.weight_decay >= 0, "weight_decay: must be >= 0"),
            (self.batch_size >= 1, "batch_size: must be >= 1"),
            (self.steps >= 0, "steps: must be >= 0"),
            (0.0 <= self.replay_prob <= 1.0, "replay_prob: must lie in [0, 1]"),
            (self.buffer_capacity >= 1, "buffer_capacity: must be >= 1"),
            (self.metric in ("l1", "l2", "sql2"), "metric: expected l1, l2 or sql2"),
            (self.prior in ("standard_normal", "fourier_matched"), "prior: unknown kind"),
            (self.mode in ("strict", "fast"), "mode: expected strict or fast"),
            (self.log_every >= 1, "log_every: must be >= 1"),
        ]
        if self.method != "ign":
            checks.append((self.imle_M >= self.batch_size, "imle_M: must be >= batch_size"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in cls.REQUIRED if k not in d]
        if missing:
            raise ConfigError(f"missing required field: {missing[0]}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown field: {unknown[0]}")
        return cls(**d)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, MlpArch):
                v = v.to_dict()
            elif isinstance(v, LossWeights):
                v = {"w_rec": v.w_rec, "w_idem": v.w_idem, "w_tight": v.w_tight,
                     "w_imle": v.w_imle}
            out[f.name] = v
        return out

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamWState:
    t: int = 0
    m: list = None
    v: list = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros(t.shape) for t in params.tensors()],
                   v=[np.zeros(t.shape) for t in params.tensors()])


def adamw_step(state, params, grads, lr, weight_decay):
    """One decoupled-weight-decay Adam update. Returns new ``(state, params)``.

    Raises NonFiniteGradientError (leaving state and params untouched) when any
    gradient entry is NaN or infinite.
    """
    g_list = grads.tensors()
    p_list = params.tensors()
    if len(g_list) != len(p_list) or any(g.shape != p.shape for g, p in zip(g_list, p_list)):
        raise ValueError("gradients are not shape-congruent with parameters")
    if not grads.all_finite():
        state.skipped += 1
        raise NonFiniteGradientError(f"non-finite gradient at step {state.t + 1}")
    if state.m is None:
        state = AdamWState.for_params(params)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(p_list, g_list, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        theta = p.astype(np.float64) * (1.0 - lr * weight_decay)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m.append(m)
        new_v.append(v)
        new_p.append(theta.astype(p.dtype))
    new_state = AdamWState(t, new_m, new_v, b1, b2, state.eps, state.skipped)
    ws, bs = new_p[0::2], new_p[1::2]
    return new_state, MlpParams(params.arch, ws, bs)


# --- replay buffer -----------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity FIFO of (x, z*) pairs backed by ring arrays."""

    def __init__(self, capacity, dim):
        self.capacity = int(capacity)
        self._x = np.zeros((self.capacity, dim))
        self._z = np.zeros((self.capacity, dim))
        self._start = 0
        self._size = 0
        self.reads = 0

    def __len__(self):
        return self._size

    def push(self, x, z):
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        for xi, zi in zip(x[-self.capacity:], z[-self.capacity:]):
            end = (self._start + self._size) % self.capacity
            self._x[end] = xi
            self._z[end] = zi
            if self._size < self.capacity:
                self._size += 1
            else:
                self._start = (self._start + 1) % self.capacity

    def _slots(self, idx):
        return (self._start + np.asarray(idx)) % self.capacity

    def get(self, idx):
        self.reads += 1
        slots = self._slots(idx)
        return self._x[slots].copy(), self._z[slots].copy()

    def pairs(self):
        """All stored pairs, oldest first."""
        slots = self._slots(np.arange(self._size))
        return self._x[slots].copy(), self._z[slots].copy()

    def sample(self, n, rng):
        idx = rng.choice(self._size, size=min(n, self._size), replace=False)
        return self.get(np.sort(idx))


# --- training steps ----------------------------------------------------------

def _prior(config, n, x_batch, rng):
    spec = ds.PriorSpec(config.prior, x_batch.shape[1])
    return ds.sample_prior(spec, n, reference_batch=x_batch, seed=rng)


def train_step_naign(params, state, x_batch, config, buffer, rng):
    x = np.asarray(x_batch, dtype=np.float64)
    w = config.loss_weights
    metric = config.metric
    if state.t < config.warm_start_steps:
        value, grads = rec_loss(params, x, metric)
        out = _combine([("rec", w.w_rec, value, grads)], params)
    else:
        terms = [("rec", w.w_rec, *rec_loss(params, x, metric))]
        u = rng.random()
        replay = len(buffer) > 0 and u < config.replay_prob
        if replay:
            xb, zb = buffer.sample(x.shape[0], rng)
            terms.append(("imle", w.w_imle, *paired_imle_loss(params, xb, zb, metric)))
            n_cand, matched = xb.shape[0], None
        else:
            zc = _prior(config, config.imle_M, x, rng)
            value, grads, matched = imle_loss(params, x, zc, metric)
            terms.append(("imle", w.w_imle, value, grads))
            buffer.push(x, zc[matched])
            n_cand = zc.shape[0]
        if config.method == "naign":
            z_idem = _prior(config, x.shape[0], x, rng)
            z_gen = _prior(config, x.shape[0], x, rng)
            terms.append(("idem", w.w_idem, *idem_loss(params, z_idem, metric, True, z_gen)))
        out = _combine(terms, params)
        out.matched_indices = matched
        out.candidate_forwards = n_cand
        out.replayed = replay
    state, params = adamw_step(state, params, out.grads, config.lr, config.weight_decay)
    return params, state, out


def train_step_ign(params, state, x_batch, config, rng):
    x = np.asarray(x_batch, dtype=np.float64)
    z = _prior(config, x.shape[0], x, rng)
    out = ign_total(params, x, z, config.loss_weights, config.metric)
    state, params = adamw_step(state, params, out.grads, config.lr, config.weight_decay)
    return params, state, out


# --- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    params: MlpParams
    config: dict
    step: int
    optimizer: AdamWState = None


def _tensor_names(n_layers):
    names = []
    for i in range(n_layers):
        names += [f"W{i}", f"b{i}"]
    return names


def checkpoint_bytes(ckpt):
    names = _tensor_names(len(ckpt.params.weights))
    tensors = list(zip(names, ckpt.params.tensors()))
    opt = None
    if ckpt.optimizer is not None and ckpt.optimizer.m is not None:
        o = ckpt.optimizer
        opt = {"t": o.t, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "skipped": o.skipped}
        tensors += [(f"adam.m.{n}", a) for n, a in zip(names, o.m)]
        tensors += [(f"adam.v.{n}", a) for n, a in zip(names, o.v)]
    manifest, blobs, offset = [], [], 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset,
                         "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"arch": ckpt.params.arch.to_dict(), "config": ckpt.config, "step": ckpt.step,
              "optimizer": opt, "tensors": manifest}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return (CKPT_MAGIC + bytes([CKPT_VERSION]) + struct.pack("<I", len(hbytes)) + hbytes
            + b"".join(blobs))


def checkpoint_from_bytes(data):
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic: not a NAIG checkpoint")
    if len(data) < 9:
        raise CheckpointError("truncated checkpoint header")
    if data[4] != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data[4]}")
    (hlen,) = struct.unpack("<I", data[5:9])
    if 9 + hlen > len(data):
        raise CheckpointError("header length exceeds file size")
    try:
        header = json.loads(data[9:9 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    blob = data[9 + hlen:]
    manifest = header.get("tensors", [])
    expected = 0
    for entry in manifest:
        n = int(np.prod(entry["shape"])) * 4
        if entry["offset"] != expected or entry["nbytes"] != n:
            raise CheckpointError(f"manifest entry {entry['name']} is inconsistent")
        expected += n
    if expected != len(blob):
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest describes {expected}")
    arrays = {e["name"]: np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4,
                                       offset=e["offset"]).reshape(e["shape"]).astype(np.float32)
              for e in manifest}
    arch = MlpArch.from_dict(header["arch"])
    n_layers = len(arch.layer_dims) - 1
    names = _tensor_names(n_layers)
    try:
        params = MlpParams(arch, [arrays[f"W{i}"] for i in range(n_layers)],
                           [arrays[f"b{i}"] for i in range(n_layers)])
    except KeyError as exc:
        raise CheckpointError(f"missing tensor {exc}") from None
    opt = None
    if header.get("optimizer") is not None:
        o = header["optimizer"]
        opt = AdamWState(t=o["t"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                         skipped=o.get("skipped", 0),
                         m=[arrays[f"adam.m.{n}"].astype(np.float64) for n in names],
                         v=[arrays[f"adam.v.{n}"].astype(np.float64) for n in names])
    return Checkpoint(params, header["config"], header["step"], opt)


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt):
    atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())


# --- run loop ----------------------------------------------------------------

class BatchSource:
    """Fresh synthetic batches each step, or shuffled epochs over a file dataset."""

    def __init__(self, spec, rng, batch_size):
        self.spec = dict(spec)
        self.rng = rng
        self.batch_size = batch_size
        self.name = self.spec["name"]
        self.fixed = None
        self.centers = None
        if self.name in ds.GENERATORS:
            probe = ds.generate(self.name, 1, self.spec.get("noise"), 0)
            self.dim = probe.dim
            self.centers = probe.mode_centers
            self.sigma = probe.noise_sigma
        else:
            self.fixed = load_dataset(self.spec)
            self.dim = self.fixed.dim
            self.centers = self.fixed.mode_centers
            self.sigma = self.fixed.noise_sigma
            self._perm = np.empty(0, dtype=np.int64)
            self._pos = 0

    def next(self):
        if self.fixed is None:
            return ds.generate(self.name, self.batch_size, self.spec.get("noise"), self.rng).points
        out = []
        need = self.batch_size
        while need > 0:
            if self._pos >= self._perm.size:
                self._perm = self.rng.permutation(self.fixed.n)
                self._pos = 0
            take = self._perm[self._pos:self._pos + need]
            self._pos += take.size
            need -= take.size
            out.append(self.fixed.points[take])
        return np.concatenate(out)


def load_dataset(spec, n=None, seed=0):
    """Materialise a dataset from a config-style spec dict."""
    name = spec["name"]
    if name in ds.GENERATORS:
        return ds.generate(name, n or spec.get("n", 10_000), spec.get("noise"),
                           spec.get("seed", seed))
    if name == "mnist":
        d = ds.load_idx_images(spec["images"], spec.get("labels"))
    elif name == "csv":
        d = ds.load_csv(spec["path"], spec.get("meta"))
    else:
        raise ConfigError(f"dataset: unknown dataset {name!r}")
    if n is not None:
        d = ds.Dataset(d.points[:n], d.name, d.mode_centers, d.noise_sigma,
                       None if d.labels is None else d.labels[:n], d.meta)
    return d


def _thread_limit(config):
    if config.mode == "strict":
        return 1
    env = os.environ.get("NAIGN_THREADS")
    return int(env) if env else None


def _eval_record(params, source, step, seed):
    from .metrics import mode_coverage
    from .net import forward
    rng = np.random.default_rng([seed, 2, step])
    z = rng.standard_normal((2048, source.dim))
    rep = mode_coverage(forward(params, z), source.centers, sigma=max(source.sigma, 1e-3))
    return {"step": step, "eval": {"covered_modes": rep.covered_modes,
                                   "collapse_entropy": rep.collapse_entropy}}


def run_training(config, out_dir=None, log_stream=None):
    """Train for ``config.steps`` steps. Returns ``(final checkpoint, log records)``.

    With ``out_dir`` set, writes ``train_log.ndjson``, periodic
    ``checkpoint_<step>.naig`` files and ``checkpoint_final.naig``.
    """
    if isinstance(config, dict):
        config = TrainConfig.from_dict(config)
    out_dir = Path(out_dir) if out_dir is not None else None
    rng = np.random.default_rng([config.seed, 1])
    source = BatchSource(config.dataset, rng, config.batch_size)
    arch = config.arch or MlpArch(input_dim=source.dim)
    if arch.input_dim != source.dim:
        raise ConfigError(f"arch: input_dim {arch.input_dim} does not match dataset dim {source.dim}")
    config.arch = arch
    params = init_mlp(arch, config.seed)
    state = AdamWState.for_params(params)
    buffer = ReplayBuffer(config.buffer_capacity, source.dim)
    cfg_dict = config.to_dict()
    records = []
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.ndjson", "w")

    def emit(rec):
        line = json.dumps(rec, sort_keys=True)
        records.append(rec)
        if log_fh is not None:
            log_fh.write(line + "\n")
        if log_stream is not None:
            log_stream.write(line + "\n")

    last_good = Checkpoint(params, cfg_dict, 0, state)
    try:
        with threadpool_limits(limits=_thread_limit(config)):
            t0 = time.perf_counter()
            for step in range(1, config.steps + 1):
                x = source.next()
                try:
                    if config.method == "ign":
                        new_params, state, br = train_step_ign(params, state, x, config, rng)
                    else:
                        new_params, state, br = train_step_naign(params, state, x, config,
                                                                 buffer, rng)
                except NonFiniteGradientError as exc:
                    log.warning("skipping step %d: %s (skipped=%d)", step, exc, state.skipped)
                    continue
                if not np.isfinite(br.total) or not new_params.all_finite():
                    if out_dir is not None:
                        save_checkpoint(out_dir / "checkpoint_last_good.naig", last_good)
                    raise TrainingDivergedError(f"non-finite loss at step {step}", last_good)
                params = new_params
                last_good = Checkpoint(params, cfg_dict, step, state)
                if step % config.log_every == 0 or step == config.steps:
                    wall = None
                    if config.mode == "fast":
                        wall = round((time.perf_counter() - t0) * 1000.0, 3)
                    emit({"step": step, **br.record(), "wall_ms": wall})
                if config.eval_every and step % config.eval_every == 0 and source.centers is not None:
                    emit(_eval_record(params, source, step, config.seed))
                if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"checkpoint_{step:08d}.naig", last_good)
    finally:
        if log_fh is not None:
            log_fh.close()
    final = Checkpoint(params, cfg_dict, state.t, state)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_final.naig", final)
    return final, records
