"""Synthetic 2-D benchmarks, MNIST IDX ingestion, priors and image degradations."""
import csv
import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Upper moon: unit circle arc over [0, pi]. Lower moon: unit arc over [pi, 2pi]
# centred at (1, -0.5).
MOON_ARCS = (
    ((0.0, 0.0), 0.0, math.pi),
    ((1.0, -0.5), math.pi, 2.0 * math.pi),
)


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    points: np.ndarray
    name: str
    mode_centers: np.ndarray = None
    noise_sigma: float = 0.0
    labels: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValueError("points must be an N x D matrix")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("dataset contains non-finite points")
        if self.mode_centers is not None:
            self.mode_centers = np.asarray(self.mode_centers, dtype=np.float64)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def metadata(self):
        return {
            "name": self.name,
            "n": self.n,
            "dim": self.dim,
            "noise_sigma": self.noise_sigma,
            "mode_centers": None if self.mode_centers is None else self.mode_centers.tolist(),
            **self.meta,
        }


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    blur_level: float = 0.0
    noise_sigma: float = 1.0
    corrupt_frac: float = 0.2
    delete_prob: float = 0.2
    fill_value: float = -1.0

    KINDS = ("blur", "gaussian_noise", "salt_pepper", "lines_rows")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown degradation {self.kind!r}; expected one of {self.KINDS}")
        if not (0.0 <= self.corrupt_frac <= 1.0 and 0.0 <= self.delete_prob <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.noise_sigma < 0 or self.blur_level < 0:
            raise ValueError("sigma and blur level must be non-negative")


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "standard_normal"
    dim: int = 2

    def __post_init__(self):
        if self.kind not in ("standard_normal", "fourier_matched"):
            raise ValueError(f"unknown prior {self.kind!r}")
        if self.dim < 1:
            raise ValueError("prior dim must be >= 1")


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gen_two_moons(n, noise=0.0, seed=0):
    rng = _rng(seed)
    upper = rng.random(n) < 0.5
    t = rng.random(n) * math.pi
    pts = np.empty((n, 2))
    for is_upper, ((cx, cy), lo, _) in zip((True, False), MOON_ARCS):
        sel = upper == is_upper
        angle = lo + t[sel]
        pts[sel, 0] = cx + np.cos(angle)
        pts[sel, 1] = cy + np.sin(angle)
    if noise > 0:
        pts += noise * rng.standard_normal((n, 2))
    return Dataset(pts, "2moons", noise_sigma=float(noise))


def eight_gaussian_centers(radius=2.0):
    angles = np.arange(8) * (math.pi / 4.0)
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def grid_centers():
    ticks = np.linspace(-4.0, 4.0, 5)
    xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def _mixture(n, centers, std, rng):
    idx = rng.integers(0, len(centers), size=n)
    pts = centers[idx] + std * rng.standard_normal((n, centers.shape[1]))
    return pts, idx


def gen_8gaussians(n, std=0.1, seed=0):
    rng = _rng(seed)
    centers = eight_gaussian_centers()
    pts, idx = _mixture(n, centers, std, rng)
    return Dataset(pts, "8gaussians", mode_centers=centers, noise_sigma=float(std), labels=idx)


def gen_grids(n, seed=0, std=0.05):
    rng = _rng(seed)
    centers = grid_centers()
    pts, idx = _mixture(n, centers, std, rng)
    return Dataset(pts, "grids", mode_centers=centers, noise_sigma=float(std), labels=idx)


GENERATORS = {
    "2moons": lambda n, noise, seed: gen_two_moons(n, 0.0 if noise is None else noise, seed),
    "8gaussians": lambda n, noise, seed: gen_8gaussians(n, 0.1 if noise is None else noise, seed),
    "grids": lambda n, noise, seed: gen_grids(n, seed, 0.05 if noise is None else noise),
}


def generate(name, n, noise=None, seed=0):
    """Dispatch to a synthetic generator; ``noise`` None means the generator default."""
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown synthetic dataset {name!r}") from None
    return gen(n, noise, seed)


# --- IDX ---------------------------------------------------------------------

def _read_bytes(path):
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _parse_idx(data, expected_magic, what):
    if len(data) < 8:
        raise IdxFormatError(f"{what}: file too short for an IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise IdxFormatError(f"{what}: truncated payload ({len(data) - header} of {count} bytes)")
    if len(data) - header > count:
        raise IdxFormatError(f"{what}: {len(data) - header - count} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx_images(images_path, labels_path=None, pad_to=32):
    """Load IDX images as an N x side^2 dataset with pixels in [-1, 1].

    Images smaller than ``pad_to`` are padded symmetrically with -1 (background).
    """
    raw = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    if raw.ndim != 3:
        raise IdxFormatError(f"images: expected 3 dimensions, got {raw.ndim}")
    imgs = raw.astype(np.float64) / 127.5 - 1.0
    n, rows, cols = imgs.shape
    if pad_to is not None and (rows < pad_to or cols < pad_to):
        pr, pc = pad_to - rows, pad_to - cols
        imgs = np.pad(imgs, ((0, 0), (pr // 2, pr - pr // 2), (pc // 2, pc - pc // 2)),
                      constant_values=-1.0)
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
        if labels.ndim != 1 or labels.shape[0] != n:
            raise IdxFormatError(f"label count {labels.shape[0]} does not match image count {n}")
        labels = labels.astype(np.int64)
    side = imgs.shape[1]
    return Dataset(imgs.reshape(n, -1), "mnist", labels=labels, meta={"side": side})


def write_idx_images(path, images):
    """Write uint8 images (N, rows, cols) as an uncompressed IDX file."""
    images = np.asarray(images, dtype=np.uint8)
    header = struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


# --- CSV ---------------------------------------------------------------------

def save_csv(dataset, path, meta_path=None):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dataset.dim)])
        for row in dataset.points:
            w.writerow([repr(float(v)) for v in row])
    if meta_path is not None:
        Path(meta_path).write_text(json.dumps(dataset.metadata(), indent=2, sort_keys=True) + "\n")


def load_csv(path, meta_path=None):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != [f"x{i}" for i in range(len(header))]:
            raise ValueError(f"{path}: header must be x0,...,x{{D-1}}")
        rows = [[float(v) for v in r] for r in reader if r]
    pts = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    name, centers, sigma, extra = path.stem, None, 0.0, {}
    if meta_path is not None and Path(meta_path).exists():
        meta = json.loads(Path(meta_path).read_text())
        name = meta.get("name", name)
        centers = meta.get("mode_centers")
        sigma = float(meta.get("noise_sigma", 0.0))
        extra = {k: v for k, v in meta.items()
                 if k not in ("name", "mode_centers", "noise_sigma", "n", "dim")}
    return Dataset(pts, name, mode_centers=None if centers is None else np.array(centers),
                   noise_sigma=sigma, meta=extra)


# --- degradations ------------------------------------------------------------

def _image_side(d):
    side = math.isqrt(d)
    if side * side != d:
        raise ValueError(f"image degradations need a square number of pixels, got D={d}")
    return side


def gaussian_kernel(sigma):
    radius = math.ceil(2.0 * sigma)
    if radius == 0:
        return np.ones(1)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur(imgs, sigma):
    kernel = gaussian_kernel(sigma)
    r = kernel.size // 2
    if r == 0:
        return imgs.copy()
    out = imgs
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect" if out.shape[axis] > r else "symmetric")
        acc = np.zeros_like(out)
        size = out.shape[axis]
        for j, kv in enumerate(kernel):
            acc += kv * np.take(padded, np.arange(j, j + size), axis=axis)
        out = acc
    return out


def degrade(batch, spec, seed=0):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("batch must be N x D")
    rng = _rng(seed)
    n, d = x.shape
    if spec.kind == "gaussian_noise":
        return x + spec.noise_sigma * rng.standard_normal(x.shape)
    side = _image_side(d)
    imgs = x.reshape(n, side, side)
    if spec.kind == "blur":
        out = _blur(imgs, spec.blur_level)
    elif spec.kind == "salt_pepper":
        out = imgs.copy()
        corrupt = rng.random(imgs.shape) < spec.corrupt_frac
        salt = rng.random(imgs.shape) < 0.5
        out[corrupt & salt] = 1.0
        out[corrupt & ~salt] = -1.0
    else:  # lines_rows
        out = imgs.copy()
        rows = rng.random((n, side)) < spec.delete_prob
        cols = rng.random((n, side)) < spec.delete_prob
        mask = rows[:, :, None] | cols[:, None, :]
        out[mask] = spec.fill_value
    return out.reshape(n, d)


# --- priors ------------------------------------------------------------------

def sample_prior(spec, n, reference_batch=None, seed=0):
    rng = _rng(seed)
    if spec.kind == "standard_normal":
        return rng.standard_normal((n, spec.dim))
    if reference_batch is None:
        raise ValueError("fourier_matched prior needs a reference batch")
    ref = np.asarray(reference_batch, dtype=np.float64)
    side = _image_side(ref.shape[1])
    amp = np.abs(np.fft.fft2(ref.reshape(-1, side, side))).mean(axis=0)
    # phases of white noise are uniform and Hermitian-symmetric, so the inverse is real
    noise_spec = np.fft.fft2(rng.standard_normal((n, side, side)))
    phase = np.exp(1j * np.angle(noise_spec))
    imgs = np.fft.ifft2(amp * phase).real.reshape(n, -1)
    imgs -= imgs.mean(axis=1, keepdims=True)
    std = imgs.std(axis=1, keepdims=True)
    return imgs / np.where(std > 0, std, 1.0)
