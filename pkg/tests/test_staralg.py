import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from afflow import numkernel as nk
from afflow import staralg as sa
from afflow.errors import DimensionMismatch, PreconditionError

seeds = st.integers(min_value=0, max_value=2 ** 32 - 1)
specs = st.sampled_from([[(2, 2)], [(1, 1), (1, 1)], [(3, 2)], [(2, 1), (1, 2)],
                         [(1, 4)], [(4, 1)], [(2, 1), (1, 1), (1, 1)]])


def _random_alg(seed, spec):
    n = sum(k * m for k, m in spec)
    rng = np.random.default_rng(seed)
    return sa.from_block_partition(n, spec, nk.haar_unitary(rng, n)), rng


def _unit_relations(alg):
    worst = 0.0
    units = list(alg.units())
    for b1, i, j, e in units:
        worst = max(worst, nk.opnorm(nk.dag(e) - alg.blocks[b1].unit(j, i)))
        for b2, k, l, f in units:
            want = alg.blocks[b1].unit(i, l) if (b1 == b2 and j == k) else 0
            worst = max(worst, nk.opnorm(e @ f - want))
    return worst


def test_canonical_embedding():
    b = sa.from_block_partition(4, [(2, 2)])
    assert b.spec == [(2, 2)] and b.dim == 4
    assert np.allclose(b.blocks[0].unit(0, 1), np.kron([[0, 1], [0, 0]], np.eye(2)))


def test_diagonal_abelian():
    b = sa.from_block_partition(2, [(1, 1), (1, 1)])
    assert b.is_abelian
    assert np.allclose(sa.cond_expect(b, [[1, 2], [3, 4]]), np.diag([1, 4]))


@given(seeds, specs)
def test_invariants_after_random_conjugation(seed, spec):
    alg, _ = _random_alg(seed, spec)
    assert _unit_relations(alg) <= 1e-10
    assert alg.invariant_residual() <= 1e-10
    total = sum(e for e in alg.diagonal_units())
    assert nk.opnorm(total - np.eye(alg.ambient_dim)) <= 1e-10
    for blk in alg.blocks:
        ranks = {np.linalg.matrix_rank(blk.unit(i, i)) for i in range(blk.size)}
        assert ranks == {blk.mult}


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        sa.from_block_partition(5, [(2, 2)])


@given(seeds, specs)
def test_cond_expect_properties(seed, spec):
    alg, rng = _random_alg(seed, spec)
    n = alg.ambient_dim
    x = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    ex = sa.CondExpectation(alg)
    ey = ex(x)
    assert nk.opnorm(ex(ey) - ey) <= 1e-10 * nk.opnorm(x)
    assert nk.opnorm(ex(np.eye(n)) - np.eye(n)) <= 1e-10
    assert abs(np.trace(ey) - np.trace(x)) <= 1e-10 * n * nk.opnorm(x)
    b = ex(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
    c = ex(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
    scale = nk.opnorm(b) * nk.opnorm(c) * nk.opnorm(x)
    assert nk.opnorm(ex(b @ x @ c) - b @ ey @ c) <= 1e-10 * scale


def test_cond_expect_is_trace_orthogonal(rng):
    alg = sa.from_block_partition(6, [(3, 2)], nk.haar_unitary(rng, 6))
    x = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
    r = x - sa.cond_expect(alg, x)
    for *_, e in alg.units():
        assert abs(np.trace(nk.dag(e) @ r)) <= 1e-12


def _commutant_oracle(alg):
    """Basis of {x : [x, e] = 0 for every unit e}, by a linear solve."""
    n = alg.ambient_dim
    eye = np.eye(n)
    rows = np.concatenate([np.kron(e, eye) - np.kron(eye, e.T) for *_, e in alg.units()])
    _, s, vh = np.linalg.svd(rows)
    # absolute cutoff: the units have norm one, so the rows are O(1) or round-off
    return vh[int((s > 1e-8).sum()):].conj().T


def _span_projector(alg):
    vecs = np.stack([e.ravel() for *_, e in alg.units()], axis=1)
    q = np.linalg.qr(vecs)[0]
    return q @ nk.dag(q)


def test_commutant_examples():
    full = sa.full_algebra(3)
    assert sa.commutant(full).spec == [(1, 3)]
    assert sa.commutant(sa.scalars(3)).spec == [(3, 1)]


@given(seeds, specs)
def test_commutant_matches_linear_solve(seed, spec):
    alg, _ = _random_alg(seed, spec)
    com = sa.commutant(alg)
    oracle = _commutant_oracle(alg)
    assert oracle.shape[1] == com.dim
    proj = _span_projector(com)
    assert np.linalg.norm(proj @ oracle - oracle) <= 1e-10 * com.dim
    for *_, e in com.units():
        for *_, f in alg.units():
            assert nk.opnorm(nk.comm(e, f)) <= 1e-10


@given(seeds, specs)
def test_double_commutant(seed, spec):
    alg, _ = _random_alg(seed, spec)
    back = sa.commutant(sa.commutant(alg))
    assert sa.one_sided_defect(alg, back).lower <= 1e-8
    assert sa.one_sided_defect(back, alg).lower <= 1e-8


def test_single_block_commutant_shape(rng):
    alg = sa.from_block_partition(6, [(3, 2)], nk.haar_unitary(rng, 6))
    assert sa.commutant(alg).spec == [(2, 3)]


def test_center_projections(rng):
    assert len(sa.center_projections(sa.from_block_partition(4, [(2, 2)]))) == 1
    zs = sa.center_projections(sa.from_block_partition(2, [(1, 1), (1, 1)]))
    assert np.allclose(zs[0], np.diag([1, 0])) and np.allclose(zs[1], np.diag([0, 1]))
    alg = sa.from_block_partition(7, [(2, 1), (1, 3), (2, 1)], nk.haar_unitary(rng, 7))
    zs = sa.center_projections(alg)
    for i, z in enumerate(zs):
        assert nk.opnorm(z @ z - z) <= 1e-10
        for w in zs[i + 1:]:
            assert nk.opnorm(z @ w) <= 1e-10
    assert nk.opnorm(sum(zs) - np.eye(7)) <= 1e-10


def test_corner_examples(rng):
    b = sa.from_block_partition(4, [(2, 2)], nk.haar_unitary(rng, 4))
    alg, j = sa.corner(b, np.eye(4))
    assert alg.spec == [(2, 2)] and nk.opnorm(j @ nk.dag(j) - np.eye(4)) <= 1e-10
    d = sa.from_block_partition(2, [(1, 1), (1, 1)])
    alg, j = sa.corner(d, np.diag([1.0, 0.0]))
    assert alg.ambient_dim == 1 and alg.dim == 1
    with pytest.raises(PreconditionError):
        sa.corner(d, np.eye(2))


def test_corner_matches_direct_compression(rng):
    b = sa.from_block_partition(7, [(2, 2), (3, 1)], nk.haar_unitary(rng, 7))
    for blk in b.blocks:
        z = blk.central_projection()
        alg, j = sa.corner(b, z)
        assert nk.opnorm(j @ nk.dag(j) - z) <= 1e-10
        compressed = sa.from_span([nk.dag(j) @ blk.unit(i, k) @ j
                                   for i in range(blk.size) for k in range(blk.size)])
        assert sa.dist_estimate(alg, compressed).upper <= 1e-10


def test_from_span_recovers_algebra(rng):
    alg = sa.from_block_partition(7, [(2, 2), (1, 3)], nk.haar_unitary(rng, 7))
    gens = [sa.cond_expect(alg, rng.standard_normal((7, 7))) for _ in range(2)]
    got = sa.from_span(gens)
    assert sorted(got.spec) == sorted(alg.spec)
    assert sa.dist_estimate(got, alg).upper <= 1e-8


def test_one_sided_defect_trivial(rng):
    alg = sa.from_block_partition(4, [(2, 2)], nk.haar_unitary(rng, 4))
    d = sa.one_sided_defect(alg, alg)
    assert d.lower <= 1e-10 and d.upper <= 1e-10
    assert sa.one_sided_defect(sa.scalars(4), alg).upper <= 1e-10


def _rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=complex)


def _brute_force_rotated(theta, points=20001):
    """sup over the unit ball of the diagonal of ||x - E_C(x)||, C = R diag R*.

    The sup of a convex function sits at an extreme point, and up to a global
    phase those are diag(1, e^{i phi})."""
    r = _rotation(theta)
    best = 0.0
    for phi in np.linspace(0, 2 * np.pi, points):
        x = np.diag([1.0, np.exp(1j * phi)])
        y = nk.dag(r) @ x @ r
        ex = r @ np.diag(np.diag(y)) @ nk.dag(r)
        best = max(best, float(np.linalg.norm(x - ex, 2)))
    return best


@pytest.mark.parametrize("theta", [0.05, 0.3, 0.7, 1.2])
def test_rotated_diagonal_vs_brute_force(theta):
    b = sa.from_block_partition(2, [(1, 1), (1, 1)])
    c = b.conjugate(_rotation(theta))
    d = sa.one_sided_defect(b, c, trials=64, seed=1)
    brute = _brute_force_rotated(theta)
    assert abs(d.lower - brute) <= 1e-6
    assert d.lower <= d.upper + 1e-12
    sym = sa.dist_estimate(b, c, trials=64, seed=1)
    assert abs(sym.lower - brute) <= 1e-6


def test_dist_self_is_zero(rng):
    alg = sa.from_block_partition(6, [(3, 2)], nk.haar_unitary(rng, 6))
    assert sa.dist_estimate(alg, alg).upper <= 1e-10


@given(seeds, specs)
def test_dist_invariant_under_conjugation(seed, spec):
    b, rng = _random_alg(seed, spec)
    n = b.ambient_dim
    c = b.conjugate(nk.expm_ith(0.1 * nk.random_hermitian(rng, n), 1.0))
    u = nk.haar_unitary(rng, n)
    d1 = sa.dist_estimate(b, c, trials=32, seed=3)
    d2 = sa.dist_estimate(b.conjugate(u), c.conjugate(u), trials=32, seed=3)
    assert abs(d1.lower - d2.lower) <= 1e-8
    assert abs(d1.upper - d2.upper) <= 1e-8


@given(seeds, specs)
def test_interval_is_ordered(seed, spec):
    b, rng = _random_alg(seed, spec)
    n = b.ambient_dim
    c = sa.from_block_partition(n, [(k, m) for k, m in spec], nk.haar_unitary(rng, n))
    d = sa.one_sided_defect(b, c, trials=16, seed=0)
    assert 0 <= d.lower <= d.upper


def test_sandwich_against_brute_force(rng):
    b = sa.from_block_partition(2, [(1, 1), (1, 1)])
    for _ in range(10):
        x = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))

        def dist(p):
            y = np.diag([p[0] + 1j * p[1], p[2] + 1j * p[3]])
            return np.linalg.norm(x - y, 2)

        d0 = np.diag(x)
        start = np.array([d0[0].real, d0[0].imag, d0[1].real, d0[1].imag])
        best = min(minimize(dist, start + s, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000}).fun
                   for s in (0, 0.3, -0.3))
        lhs = np.linalg.norm(x - sa.cond_expect(b, x), 2)
        assert lhs <= 2 * best + 1e-9


def test_haar_unitary_in_examples(rng):
    u = sa.haar_unitary_in(sa.scalars(3), rng)
    assert nk.opnorm(u - u[0, 0] * np.eye(3)) <= 1e-12 and abs(abs(u[0, 0]) - 1) <= 1e-12
    alg = sa.from_block_partition(6, [(2, 1), (2, 2)], nk.haar_unitary(rng, 6))
    u = sa.haar_unitary_in(alg, 4)
    assert nk.opnorm(nk.dag(u) @ u - np.eye(6)) <= 1e-10
    assert sa.one_sided_defect(sa.from_span([u]), alg).upper <= 1e-8


def test_haar_first_moment():
    k, samples = 3, 10_000
    rng = np.random.default_rng(99)
    alg = sa.from_block_partition(k, [(k, 1)])
    mean = sum(sa.haar_unitary_in(alg, rng) for _ in range(samples)) / samples
    # each real component of an entry has variance 1 / (2k)
    sigma = np.sqrt(1 / (2 * k) / samples)
    assert np.max(np.abs(mean.real)) <= 3 * sigma
    assert np.max(np.abs(mean.imag)) <= 3 * sigma


def test_json_roundtrip(rng):
    alg = sa.from_block_partition(5, [(2, 2), (1, 1)], nk.haar_unitary(rng, 5))
    back = sa.MatrixSubalgebra.from_json(alg.to_json())
    assert back.spec == alg.spec
    assert sa.dist_estimate(alg, back).upper <= 1e-12
