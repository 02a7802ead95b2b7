import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from naign.datasets import eight_gaussian_centers
from naign.metrics import (
    PcaFeatures,
    coverage_density,
    evaluate_generation,
    feature_map_for,
    fld,
    frechet_distance,
    mae,
    mode_coverage,
    report_json,
    table_csv,
)
from naign.numerics import GaussianStats


def _dist(a, b):
    return math.sqrt(sum((u - v) ** 2 for u, v in zip(a, b)))


def naive_coverage_density(real, gen, k):
    """Double-loop oracle with radii from a full sort."""
    n, m = len(real), len(gen)
    radii = []
    for i in range(n):
        ds = sorted(_dist(real[i], real[j]) for j in range(n) if j != i)
        radii.append(ds[k - 1])
    covered, inside = 0, 0
    for i in range(n):
        hit = False
        for j in range(m):
            if _dist(real[i], gen[j]) <= radii[i]:
                hit = True
                inside += 1
        covered += hit
    return covered / n, inside / (k * m)


def test_mae_examples():
    a = np.random.default_rng(0).normal(size=(4, 3))
    assert mae(a, a) == 0.0
    assert mae([[0.0, 0.0]], [[3.0, -4.0]]) == 3.5
    perm = np.random.default_rng(1).permutation(4)
    b = np.random.default_rng(2).normal(size=(4, 3))
    assert abs(mae(a[perm], b[perm]) - mae(a, b)) < 1e-15
    with pytest.raises(ValueError):
        mae(np.zeros((2, 2)), np.zeros((2, 3)))


def test_mae_flat_loop_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
    total = 0.0
    for i in range(7):
        for j in range(5):
            total += abs(a[i, j] - b[i, j])
    assert abs(mae(a, b) - total / 35) < 1e-14


def test_coverage_density_examples():
    real = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])
    # 0.5 lies in the balls of x=0 and x=1 (radius 1): coverage 2/5, density 2 / (k * M) = 2
    assert coverage_density(real, [[0.5]], 1) == (2 / 5, 2.0)
    assert coverage_density(real, [[100.0]], 1) == (0.0, 0.0)
    assert coverage_density(real, real, 2)[0] == 1.0
    with pytest.raises(ValueError):
        coverage_density(real, real, 5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 60), st.integers(1, 60), st.integers(1, 6))
def test_coverage_density_matches_naive(seed, n, m, k):
    if k >= n:
        k = n - 1
    rng = np.random.default_rng(seed)
    real = rng.normal(size=(n, 2)).round(1)  # rounding creates ties on the ball boundary
    gen = rng.normal(size=(m, 2)).round(1)
    assert coverage_density(real, gen, k) == naive_coverage_density(real.tolist(), gen.tolist(), k)


def test_coverage_density_self_distinct():
    s = np.random.default_rng(4).normal(size=(100, 3))
    cov, dens = coverage_density(s, s, 5)
    assert cov == 1.0 and dens >= 1 - 1e-12


def test_fld_population_examples():
    # closed form with population parameters
    eye = np.eye(2)
    assert abs(frechet_distance(GaussianStats(np.zeros(2), eye),
                                GaussianStats(np.array([3.0, 0.0]), eye)) - 9.0) < 1e-12
    assert abs(frechet_distance(GaussianStats(np.zeros(2), 4 * eye),
                                GaussianStats(np.zeros(2), eye)) - 2.0) < 1e-12


def test_fld_non_commuting_covariances():
    # 1-D oracle embedded in 2-D: Tr((A B)^{1/2}) via eigenvalues of A B
    rng = np.random.default_rng(5)
    for _ in range(10):
        g1, g2 = rng.normal(size=(2, 2, 2))
        a, b = g1 @ g1.T + 0.1 * np.eye(2), g2 @ g2.T + 0.1 * np.eye(2)
        ev = np.linalg.eigvals(a @ b).real
        expected = np.trace(a) + np.trace(b) - 2 * np.sqrt(np.clip(ev, 0, None)).sum()
        got = frechet_distance(GaussianStats(np.zeros(2), a), GaussianStats(np.zeros(2), b))
        assert abs(got - expected) < 1e-9


def test_fld_identical_sets():
    s = np.random.default_rng(6).normal(size=(500, 4))
    assert abs(fld(s, s)) <= 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 2 * math.pi))
def test_fld_symmetry_and_rotation(seed, angle):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(60, 2)) @ rng.normal(size=(2, 2))
    b = rng.normal(size=(80, 2)) + rng.normal(size=2)
    base = fld(a, b)
    assert base >= -1e-9
    assert abs(base - fld(b, a)) <= 1e-9 * (1 + abs(base))
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    assert abs(fld(a @ rot.T, b @ rot.T) - base) <= 1e-6 * (1 + abs(base))


def test_pca_features_deterministic_signs():
    ref = np.random.default_rng(7).normal(size=(200, 10)) * np.arange(1, 11)
    pca = PcaFeatures(ref, 4)
    assert pca(ref).shape == (200, 4)
    flipped = PcaFeatures(ref[::-1], 4)
    assert np.allclose(pca.components, flipped.components, atol=1e-10)
    assert feature_map_for(ref[:, :2])[1] == "identity"
    assert feature_map_for(ref, 4)[1] == "pca4"


def test_evaluate_generation_self():
    s = np.random.default_rng(8).normal(size=(300, 2))
    rep = evaluate_generation(s, s)
    assert rep.coverage == 1.0 and abs(rep.fld) < 1e-9 and rep.feature_map == "identity"
    assert (rep.n_real, rep.n_gen, rep.k) == (300, 300, 5)


def test_mode_coverage_examples():
    centers = eight_gaussian_centers()
    rep = mode_coverage(centers, centers)
    assert rep.covered_modes == 8 and abs(rep.collapse_entropy - math.log(8)) < 1e-12
    rep = mode_coverage(np.tile(centers[2], (50, 1)), centers)
    assert rep.covered_modes == 1 and rep.collapse_entropy == 0.0
    rep = mode_coverage(np.repeat(centers[:7], 5, axis=0), centers)
    assert rep.covered_modes == 7 and abs(rep.collapse_entropy - math.log(7)) < 1e-12
    assert rep.hits == [5] * 7 + [0]
    with pytest.raises(ValueError):
        mode_coverage(centers, np.zeros((0, 2)))
    with pytest.raises(ValueError):
        mode_coverage(centers, centers, sigma=0.0)


def test_mode_coverage_radius():
    centers = np.array([[0.0, 0.0], [10.0, 0.0]])
    gen = np.array([[0.3, 0.0], [10.31, 0.0]])
    rep = mode_coverage(gen, centers, 3.0, 0.1)
    assert rep.covered_modes == 1 and rep.hits == [1, 1]


def test_table_and_json():
    text = table_csv({"NAIGN f(z)": {"fld": 0.5, "coverage": 0.9}, "IGN": {"fld": 1.25}},
                     ["fld", "coverage", "density"])
    assert text.splitlines() == ["method,fld,coverage,density", "NAIGN f(z),0.5,0.9,",
                                 "IGN,1.25,,"]
    assert json.loads(report_json({"b": 1, "a": [1, 2]})) == {"a": [1, 2], "b": 1}
