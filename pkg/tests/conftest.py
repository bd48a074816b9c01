import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from afflow import numkernel as nk
from afflow import staralg as sa

settings.register_profile(
    "afflow", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("afflow")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def factor(rng, n, k):
    """Random M_K ⊗ 1 inside M_N."""
    return sa.from_block_partition(n, [(k, n // k)], nk.haar_unitary(rng, n))


def split_hamiltonian(rng, b):
    """Random h_B + h_B' for a factor B."""
    hb = sa.cond_expect(b, nk.random_hermitian(rng, b.ambient_dim))
    hc = sa.cond_expect(sa.commutant(b), nk.random_hermitian(rng, b.ambient_dim))
    return nk.hermitian(hb + hc)


def unit_perturbation(rng, n):
    return nk.random_hermitian(rng, n)


def product_state_instance(rng, n, k, eta):
    """(H, B, Ω): H = h_B ⊗ 1 + 1 ⊗ h_B' + η QVQ with Ω = U(ξ ⊗ η) a ground
    product vector of the unperturbed part and Q = 1 - |Ω><Ω|, so Ω stays
    an eigenvector."""
    m = n // k
    u = nk.haar_unitary(rng, n)
    b = sa.from_block_partition(n, [(k, m)], u)
    hb = nk.random_hermitian(rng, k)
    hc = nk.random_hermitian(rng, m)
    xi = nk.herm_eig(hb).vectors[:, 0]
    et = nk.herm_eig(hc).vectors[:, 0]
    h0 = u @ (np.kron(hb, np.eye(m)) + np.kron(np.eye(k), hc)) @ nk.dag(u)
    om = u @ np.kron(xi, et)
    q = np.eye(n) - np.outer(om, om.conj())
    H = nk.hermitian(h0 + eta * q @ nk.random_hermitian(rng, n) @ q)
    return H, b, om, hb, xi
