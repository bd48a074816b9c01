import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afflow import numkernel as nk
from afflow.correction import band_g, band_g1
from afflow.errors import ContourHitsSpectrum, GapTooSmall, NearSingular

seeds = st.integers(min_value=0, max_value=2 ** 32 - 1)
dims = st.integers(min_value=1, max_value=7)


def test_herm_eig_diagonal_and_swap():
    assert np.allclose(nk.herm_eig(np.diag([3.0, 1.0, 2.0])).values, [1, 2, 3])
    assert np.allclose(nk.herm_eig([[0, 1], [1, 0]]).values, [-1, 1])


def test_herm_eig_reconstruction(rng):
    x = nk.random_hermitian(rng, 8, 3.0)
    dec = nk.herm_eig(x)
    assert nk.opnorm(dec.rebuild() - x) <= 1e-12 * 3
    assert np.all(np.diff(dec.values) >= 0)


def test_hermitian_symmetrizes():
    x = np.array([[1.0, 2.0 + 1e-13j], [2.0, 1.0]])
    h = nk.hermitian(x)
    assert nk.opnorm(h - nk.dag(h)) == 0.0


def test_expm_ith_examples():
    h = np.diag([1.0, -1.0])
    assert np.allclose(nk.expm_ith(h, 0.0), np.eye(2))
    assert np.allclose(nk.expm_ith(h, np.pi / 2), np.diag([1j, -1j]), atol=1e-15)


def test_expm_ith_vs_lie_splitting(rng):
    h = nk.random_hermitian(rng, 6)
    d = np.diag(np.diag(h))
    off = h - d
    t, steps = 0.3, 2 ** 10
    a = nk.expm_ith(d, t / steps / 2)
    b = nk.expm_ith(off, t / steps)
    step = a @ b @ a
    u = np.linalg.matrix_power(step, steps)
    assert nk.opnorm(u - nk.expm_ith(h, t)) <= 1e-8


@given(seeds, dims, st.floats(-10, 10), st.floats(-10, 10))
def test_expm_group_law(seed, n, s, t):
    h = nk.random_hermitian(np.random.default_rng(seed), n, 2.0)
    lhs = nk.expm_ith(h, s) @ nk.expm_ith(h, t)
    assert nk.opnorm(lhs - nk.expm_ith(h, s + t)) <= 1e-10


def test_polar_examples(rng):
    u = nk.haar_unitary(rng, 5)
    f = nk.polar(u)
    assert nk.opnorm(f.unitary - u) <= 1e-10
    assert nk.opnorm(f.positive - np.eye(5)) <= 1e-10
    f = nk.polar(2 * np.eye(3))
    assert np.allclose(f.unitary, np.eye(3)) and np.allclose(f.positive, 2 * np.eye(3))


def test_polar_reconstruction_and_closeness(rng):
    u = nk.haar_unitary(rng, 6)
    k = nk.random_hermitian(rng, 6)
    z = u @ (np.eye(6) + 0.1 * k)
    f = nk.polar(z)
    assert nk.opnorm(f.positive @ f.unitary - z) <= 1e-10 * nk.opnorm(z)
    assert nk.is_unitary(f.unitary)
    # the nearest unitary moves at most about ||z*z - 1||
    assert nk.opnorm(f.unitary - z) <= nk.opnorm(nk.dag(z) @ z - np.eye(6))


def test_polar_singular():
    with pytest.raises(NearSingular):
        nk.polar(np.diag([1.0, 0.0]))


@given(seeds, dims)
def test_polar_roundtrip_unitary(seed, n):
    u = nk.haar_unitary(np.random.default_rng(seed), n)
    assert nk.opnorm(nk.polar(u).unitary - u) <= 1e-10


def test_spectral_projection_examples():
    assert np.allclose(nk.spectral_projection(np.diag([0.0, 1.0]), 0.5, 1.5), np.diag([0, 1]))
    p = np.full((2, 2), 0.5)
    assert nk.opnorm(nk.spectral_projection(p, 0.5) - p) <= 1e-12


def test_spectral_projection_guard():
    with pytest.raises(GapTooSmall):
        nk.spectral_projection(np.diag([0.5, 1.0]), 0.5)


@given(seeds, st.integers(2, 7))
def test_disjoint_projections_orthogonal(seed, n):
    rng = np.random.default_rng(seed)
    u = nk.haar_unitary(rng, n)
    vals = np.sort(rng.uniform(-1, 1, n)) + np.arange(n)
    x = u @ np.diag(vals) @ nk.dag(u)
    cut = vals[n // 2 - 1] + 0.5
    p = nk.spectral_projection(x, -np.inf, cut)
    q = nk.spectral_projection(x, cut, np.inf)
    assert nk.opnorm(p @ q) <= 1e-10
    assert nk.opnorm(p @ p - p) <= 1e-10


def test_riesz_examples():
    assert nk.opnorm(nk.riesz_projection(np.eye(3), 1.0, 0.5) - np.eye(3)) <= 1e-12
    assert nk.opnorm(nk.riesz_projection(np.zeros((3, 3)), 1.0, 0.5)) <= 1e-12


def test_riesz_hits_spectrum():
    with pytest.raises(ContourHitsSpectrum):
        nk.riesz_projection(np.diag([0.5, 1.0]), 1.0, 0.5)


def _gapped(rng, n, gap):
    """Hermitian matrix with spectrum at least `gap` away from |z - 1| = 1/2."""
    u = nk.haar_unitary(rng, n)
    inside = rng.uniform(1 - 0.5 + gap, 1 + 0.5 - gap, n)
    outside = rng.uniform(-0.5, 0.5 - gap, n)
    vals = np.where(rng.random(n) < 0.5, inside, outside)
    return u @ np.diag(vals) @ nk.dag(u)


@given(seeds, st.integers(2, 8))
def test_riesz_matches_eigendecomposition_64(seed, n):
    x = _gapped(np.random.default_rng(seed), n, 0.3)
    r = nk.riesz_projection(x, 1.0, 0.5, nodes=64)
    assert nk.opnorm(r - nk.spectral_projection(x, 0.5, 1.5)) <= 1e-8


@given(seeds, st.integers(2, 8))
def test_riesz_matches_eigendecomposition_gap_tenth(seed, n):
    # trapezoid error decays like (0.5 / 0.6) ** nodes here, so 64 nodes are not enough
    x = _gapped(np.random.default_rng(seed), n, 0.1)
    r = nk.riesz_projection(x, 1.0, 0.5, nodes=128)
    assert nk.opnorm(r - nk.spectral_projection(x, 0.5, 1.5)) <= 1e-8


def test_matrix_function_examples(rng):
    x = nk.random_hermitian(rng, 4)
    assert nk.opnorm(nk.matrix_function(x, lambda t: t) - x) <= 1e-12
    assert np.allclose(nk.matrix_function(np.diag([1.0, 2.0]), lambda t: t ** 2), np.diag([1, 4]))


def test_matrix_function_g1_is_t_times_g(rng):
    u = nk.haar_unitary(rng, 6)
    vals = np.array([0.01, 0.02, 0.2, 0.8, 0.97, 0.999])
    x = u @ np.diag(vals) @ nk.dag(u)
    lhs = nk.matrix_function(x, band_g1)
    rhs = u @ np.diag(vals * band_g(vals)) @ nk.dag(u)
    assert nk.opnorm(lhs - rhs) <= 1e-10
    # on the outer bands g1 is 0 and t
    assert np.allclose(band_g1(vals[[0, 1, 2]]), 0)
    assert np.allclose(band_g1(vals[[3, 4, 5]]), vals[[3, 4, 5]])


def test_opnorm_examples(rng):
    assert nk.opnorm(np.eye(4)) == pytest.approx(1.0)
    assert nk.opnorm(np.diag([3.0, -4.0])) == pytest.approx(4.0)
    x = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
    v = rng.standard_normal(6) + 0j
    for _ in range(500):
        v = nk.dag(x) @ (x @ v)
        v /= np.linalg.norm(v)
    power = np.linalg.norm(x @ v)
    assert abs(nk.opnorm(x) - power) <= 1e-8 * power


def test_haar_unitary_is_unitary(rng):
    assert nk.is_unitary(nk.haar_unitary(rng, 7))


def test_matrix_json_roundtrip(rng):
    x = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    assert np.array_equal(nk.matrix_from_json(nk.matrix_to_json(x)), x)


def test_tolerance_ladder_scaling():
    t = nk.TOL.scaled(10)
    assert (t.construct, t.oracle, t.guard) == pytest.approx((1e-9, 1e-7, 1e-5))
