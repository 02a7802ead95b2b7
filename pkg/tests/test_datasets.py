import gzip
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from naign.datasets import (
    DegradationSpec,
    IdxFormatError,
    PriorSpec,
    degrade,
    gaussian_kernel,
    gen_8gaussians,
    gen_grids,
    gen_two_moons,
    generate,
    load_csv,
    load_idx_images,
    sample_prior,
    save_csv,
    write_idx_images,
    write_idx_labels,
)
from naign.fields import moons_distance
from naign.numerics import fit_gaussian, pairwise_distances, pearson


def test_two_moons_noiseless_on_arcs():
    ds = gen_two_moons(5000, 0.0, 0)
    assert moons_distance(ds.points).max() <= 1e-9
    assert ds.noise_sigma == 0.0


def test_two_moons_deterministic():
    a, b = gen_two_moons(4, 0.1, 11), gen_two_moons(4, 0.1, 11)
    assert a.points.tobytes() == b.points.tobytes()


def test_two_moons_centroid():
    # upper arc centroid (0, 2/pi), lower arc centroid (1, -0.5 - 2/pi); midpoint (0.5, -0.25)
    mean = gen_two_moons(200_000, 0.0, 1).points.mean(axis=0)
    assert np.abs(mean - [0.5, -0.25]).max() < 0.05


def test_8gaussians_centers_and_degenerate():
    ds = gen_8gaussians(100, 0.0, 0)
    r2 = math.sqrt(2.0)
    expected = [(2, 0), (r2, r2), (0, 2), (-r2, r2), (-2, 0), (-r2, -r2), (0, -2), (r2, -r2)]
    assert np.allclose(ds.mode_centers, expected, atol=1e-15)
    assert pairwise_distances(ds.points, ds.mode_centers).min(axis=1).max() == 0.0


def test_8gaussians_mode_counts_binomial():
    ds = gen_8gaussians(8000, 0.1, 3)
    counts = np.bincount(ds.labels, minlength=8)
    sigma = math.sqrt(8000 * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - 1000) <= 3 * sigma)


def test_8gaussians_per_mode_spread():
    ds = gen_8gaussians(16_000, 0.1, 4)
    for k in range(8):
        resid = ds.points[ds.labels == k] - ds.mode_centers[k]
        assert np.abs(resid.std(axis=0) - 0.1).max() < 0.01


def test_grids_lattice():
    ds = gen_grids(1000, 7)
    c = ds.mode_centers
    assert len(c) == 25
    d = pairwise_distances(c, c)
    np.fill_diagonal(d, np.inf)
    assert d.min() == 2.0
    assert c.min() == -4.0 and c.max() == 4.0
    assert gen_grids(50, 7).points.tobytes() == gen_grids(50, 7).points.tobytes()
    tight = gen_grids(500, 1, std=1e-12)
    assert pairwise_distances(tight.points, c).min(axis=1).max() < 1e-10


def test_grids_mode_chi_square():
    ds = gen_grids(25_000, 2)
    counts = np.bincount(ds.labels, minlength=25)
    chi2 = ((counts - 1000) ** 2 / 1000).sum()
    # 99.9% quantile of chi^2 with 24 degrees of freedom is about 51.2
    assert chi2 < 51.2


def test_generate_dispatch():
    assert generate("8gaussians", 10, None, 0).noise_sigma == 0.1
    assert generate("grids", 10, None, 0).noise_sigma == 0.05
    with pytest.raises(ValueError):
        generate("spirals", 10)


def _idx_bytes(images):
    images = np.asarray(images, dtype=np.uint8)
    return struct.pack(">I3I", 0x803, *images.shape) + images.tobytes()


def test_idx_normalization_and_padding(tmp_path):
    imgs = np.zeros((3, 28, 28), dtype=np.uint8)
    imgs[1] = 255
    imgs[2, 0, 0] = 255
    write_idx_images(tmp_path / "img", imgs)
    write_idx_labels(tmp_path / "lab", [1, 2, 3])
    ds = load_idx_images(tmp_path / "img", tmp_path / "lab")
    assert ds.points.shape == (3, 1024)
    assert np.all(ds.points[0] == -1.0)
    img1 = ds.points[1].reshape(32, 32)
    assert np.all(img1[2:30, 2:30] == 1.0)
    assert np.all(img1[:2] == -1.0) and np.all(img1[:, 30:] == -1.0)
    assert ds.points[2].reshape(32, 32)[2, 2] == 1.0
    assert ds.labels.tolist() == [1, 2, 3]


def test_idx_gzip(tmp_path):
    imgs = np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 4, 4)
    (tmp_path / "img.gz").write_bytes(gzip.compress(_idx_bytes(imgs)))
    ds = load_idx_images(tmp_path / "img.gz", pad_to=None)
    assert np.allclose(ds.points, imgs.reshape(2, -1) / 127.5 - 1.0)


def test_idx_rejects_corruption(tmp_path):
    good = _idx_bytes(np.zeros((2, 28, 28)))
    bad_magic = b"\x00\x00\x08\x01" + good[4:]
    cases = {"magic": bad_magic, "trunc": good[:-1], "header": good[:10], "trail": good + b"\x00"}
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(IdxFormatError):
            load_idx_images(tmp_path / name)


def test_idx_label_count_mismatch(tmp_path):
    (tmp_path / "img").write_bytes(_idx_bytes(np.zeros((2, 28, 28))))
    write_idx_labels(tmp_path / "lab", [1, 2, 3])
    with pytest.raises(IdxFormatError):
        load_idx_images(tmp_path / "img", tmp_path / "lab")


def test_csv_roundtrip(tmp_path):
    ds = gen_8gaussians(20, 0.1, 0)
    save_csv(ds, tmp_path / "d.csv", tmp_path / "d.json")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "x0,x1"
    back = load_csv(tmp_path / "d.csv", tmp_path / "d.json")
    assert np.array_equal(back.points, ds.points)
    assert np.array_equal(back.mode_centers, ds.mode_centers)
    assert back.noise_sigma == 0.1 and back.name == "8gaussians"


def test_kernel_size():
    for level, size in ((0.0, 1), (0.3, 3), (1.0, 5), (1.5, 7), (2.2, 11)):
        k = gaussian_kernel(level)
        assert k.size == 2 * math.ceil(2 * level) + 1 == size
        assert abs(k.sum() - 1.0) < 1e-15


def test_blur_small_level_is_identity():
    x = np.random.default_rng(0).uniform(-1, 1, size=(3, 64))
    assert np.abs(degrade(x, DegradationSpec("blur", blur_level=1e-6)) - x).max() <= 1e-9
    assert np.array_equal(degrade(x, DegradationSpec("blur", blur_level=0.0)), x)


def test_blur_preserves_constant_and_mean_with_reflect():
    x = np.full((2, 100), 0.3)
    assert np.allclose(degrade(x, DegradationSpec("blur", blur_level=1.3)), 0.3, atol=1e-15)


def test_blur_matches_direct_2d_convolution():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(8, 8))
    k = gaussian_kernel(0.8)
    r = k.size // 2
    padded = np.pad(img, r, mode="reflect")
    k2 = np.outer(k, k)
    expected = np.array([[(padded[i:i + k.size, j:j + k.size] * k2).sum() for j in range(8)]
                         for i in range(8)])
    out = degrade(img.reshape(1, -1), DegradationSpec("blur", blur_level=0.8))
    assert np.allclose(out.reshape(8, 8), expected, atol=1e-13)


def test_gaussian_noise_statistics():
    x = np.zeros((200, 100))
    out = degrade(x, DegradationSpec("gaussian_noise"), seed=0)
    assert abs(out.std() - 1.0) < 0.01
    assert degrade(np.zeros((2, 3)), DegradationSpec("gaussian_noise"), 0).shape == (2, 3)


def test_salt_pepper_fraction_on_zero_image():
    for seed in range(10):
        out = degrade(np.zeros((1, 1024)), DegradationSpec("salt_pepper"), seed)
        frac = np.mean(np.abs(out) == 1.0)
        assert 0.17 <= frac <= 0.23


def test_lines_rows_expected_fraction():
    out = degrade(np.zeros((400, 1024)), DegradationSpec("lines_rows"), 0)
    assert abs(np.mean(out == -1.0) - (1 - 0.8 ** 2)) < 0.01


def test_image_kinds_need_square():
    for kind in ("blur", "salt_pepper", "lines_rows"):
        with pytest.raises(ValueError):
            degrade(np.zeros((1, 10)), DegradationSpec(kind, blur_level=1.0))


def test_degradation_spec_validation():
    with pytest.raises(ValueError):
        DegradationSpec("smudge")
    with pytest.raises(ValueError):
        DegradationSpec("salt_pepper", corrupt_frac=1.5)
    with pytest.raises(ValueError):
        DegradationSpec("gaussian_noise", noise_sigma=-1)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(DegradationSpec.KINDS), st.integers(0, 2**31 - 1))
def test_degrade_finite_deterministic_and_value_set(kind, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, size=(2, 36))
    spec = DegradationSpec(kind, blur_level=1.0)
    a, b = degrade(x, spec, seed), degrade(x, spec, seed)
    assert np.all(np.isfinite(a))
    assert a.tobytes() == b.tobytes()
    if kind == "salt_pepper":
        assert np.all((a == x) | (a == 1.0) | (a == -1.0))


def test_standard_normal_prior():
    z = sample_prior(PriorSpec("standard_normal", 2), 100_000, seed=0)
    assert np.abs(fit_gaussian(z).cov - np.eye(2)).max() < 0.05


def _blobs(n=64, side=16, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:side, :side]
    imgs = []
    for _ in range(n):
        cx, cy, s = rng.uniform(5, 11), rng.uniform(5, 11), rng.uniform(1.5, 3)
        imgs.append(np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s)) * 2 - 1)
    return np.array(imgs).reshape(n, -1)


def test_fourier_prior_standardized():
    z = sample_prior(PriorSpec("fourier_matched", 256), 50, _blobs(), seed=1)
    assert z.shape == (50, 256)
    assert np.abs(z.mean(axis=1)).max() < 1e-6
    assert np.abs(z.std(axis=1) - 1).max() < 1e-9


def test_fourier_prior_spectrum_matches_reference():
    ref = _blobs()
    z = sample_prior(PriorSpec("fourier_matched", 256), 200, ref, seed=2)
    amp_ref = np.abs(np.fft.fft2(ref.reshape(-1, 16, 16))).mean(axis=0).ravel()
    amp_gen = np.abs(np.fft.fft2(z.reshape(-1, 16, 16))).mean(axis=0).ravel()
    # the DC bin is removed by the per-sample standardization
    assert pearson(amp_ref[1:], amp_gen[1:]) >= 0.95


def test_fourier_prior_needs_reference():
    with pytest.raises(ValueError):
        sample_prior(PriorSpec("fourier_matched", 16), 3)
    with pytest.raises(ValueError):
        sample_prior(PriorSpec("fourier_matched", 10), 3, np.zeros((2, 10)))
