"""Dense complex linear algebra on M_N.

Matrices are plain ``numpy`` arrays of dtype complex128. Hermitian inputs
are symmetrized on entry so that rounding drift cannot accumulate through
long pipelines. Every matrix function goes through a Hermitian
eigendecomposition; the contour integral in `riesz_projection` is kept as
an independent oracle.

Polar convention: ``z = positive @ unitary`` with ``positive = (z z*)^{1/2}``
on the left. For invertible ``z`` the unitary factor coincides with the one
of the right-handed decomposition, so only the positive factor depends on
the convention.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContourHitsSpectrum,
    EigenSolverError,
    GapTooSmall,
    NearSingular,
)


@dataclass(frozen=True)
class Tolerances:
    """The tolerance ladder. `scaled` multiplies all three rungs."""

    construct: float = 1e-10
    oracle: float = 1e-8
    guard: float = 1e-6

    def scaled(self, factor):
        return Tolerances(self.construct * factor, self.oracle * factor,
                          self.guard * factor)


TOL = Tolerances()


@dataclass(frozen=True)
class SpectralDecomposition:
    values: np.ndarray
    vectors: np.ndarray

    def rebuild(self):
        return (self.vectors * self.values) @ self.vectors.conj().T


@dataclass(frozen=True)
class PolarFactors:
    unitary: np.ndarray
    positive: np.ndarray


def as_matrix(x):
    x = np.asarray(x, dtype=complex)
    if x.ndim != 2 or x.shape[0] != x.shape[1] or x.shape[0] < 1:
        raise ValueError(f"expected a square matrix, got shape {x.shape}")
    return x


def hermitian(x):
    x = as_matrix(x)
    return (x + x.conj().T) / 2


def dag(x):
    return x.conj().T


def comm(a, b):
    return a @ b - b @ a


def eye(n):
    return np.eye(n, dtype=complex)


def opnorm(x):
    """Largest singular value."""
    x = np.asarray(x)
    if x.size == 0:
        return 0.0
    if x.ndim == 1:
        return float(np.linalg.norm(x))
    return float(np.linalg.norm(x, 2))


def is_unitary(u, tol=TOL.construct):
    u = as_matrix(u)
    return opnorm(u @ dag(u) - eye(u.shape[0])) <= tol


def herm_eig(x):
    """Eigendecomposition of a Hermitian matrix, eigenvalues ascending."""
    x = hermitian(x)
    try:
        vals, vecs = np.linalg.eigh(x)
    except np.linalg.LinAlgError as exc:
        raise EigenSolverError(str(exc), residual=float("nan")) from exc
    dec = SpectralDecomposition(vals, vecs)
    scale = max(float(np.max(np.abs(vals))) if vals.size else 0.0, 1.0)
    # Frobenius dominates the operator norm, so this check is conservative
    resid = float(np.linalg.norm(dec.rebuild() - x))
    if resid > TOL.construct * scale:
        raise EigenSolverError("eigendecomposition residual too large",
                               residual=resid)
    return dec


def expm_ith(h, t, eig=None):
    """e^{ith} for Hermitian h."""
    dec = eig if eig is not None else herm_eig(h)
    return (dec.vectors * np.exp(1j * t * dec.values)) @ dag(dec.vectors)


def matrix_function(x, f, eig=None):
    """f applied to the eigenvalues of Hermitian x."""
    dec = eig if eig is not None else herm_eig(x)
    vals = np.asarray(f(dec.values), dtype=complex)
    return hermitian((dec.vectors * vals) @ dag(dec.vectors))


def polar(z, tol=TOL.oracle):
    """Polar decomposition z = |z*| v with the positive factor on the left.

    Parameters
    ----------
    z : (N, N) complex array
        Must be invertible; the smallest singular value has to exceed
        ``tol * ||z||``.

    Returns
    -------
    PolarFactors
        ``unitary`` is v and ``positive`` is (z z*)^{1/2}.
    """
    z = as_matrix(z)
    left, sing, right = np.linalg.svd(z)
    if sing[-1] <= tol * max(sing[0], 1e-300):
        raise NearSingular("polar decomposition of a near-singular matrix",
                           smallest_singular=float(sing[-1]))
    unitary = left @ right
    positive = hermitian((left * sing) @ dag(left))
    return PolarFactors(unitary, positive)


def spectral_projection(x, lo, hi=np.inf, gap_tol=TOL.guard, eig=None):
    """Projection onto the eigenvectors of x with eigenvalue in [lo, hi].

    Raises `GapTooSmall` when an eigenvalue sits within `gap_tol` of a
    finite endpoint.
    """
    dec = eig if eig is not None else herm_eig(x)
    vals = dec.values
    for end in (lo, hi):
        if np.isfinite(end):
            near = np.abs(vals - end) < gap_tol
            if near.any():
                raise GapTooSmall("eigenvalue inside the guard band",
                                  eigenvalue=float(vals[near][0]),
                                  endpoint=float(end))
    mask = (vals >= lo) & (vals <= hi)
    vecs = dec.vectors[:, mask]
    return hermitian(vecs @ dag(vecs))


def riesz_projection(x, center, radius, nodes=64, max_cond=1e8):
    """Trapezoidal quadrature of (1/2πi) ∮ (z - x)^{-1} dz on a circle.

    The orientation is counterclockwise, so for a Hermitian input with no
    eigenvalue on the circle the result is the spectral projection onto
    the eigenvalues inside.
    """
    x = as_matrix(x)
    n = x.shape[0]
    one = eye(n)
    total = np.zeros((n, n), dtype=complex)
    for k in range(nodes):
        phase = np.exp(2j * np.pi * k / nodes)
        z = center + radius * phase
        shifted = z * one - x
        cond = np.linalg.cond(shifted)
        if not np.isfinite(cond) or cond > max_cond:
            raise ContourHitsSpectrum("resolvent blows up on the contour",
                                      node=k, condition=float(cond))
        # dz = i r e^{iθ} dθ, dθ = 2π/nodes; the 2πi cancels.
        total += np.linalg.solve(shifted, one) * (radius * phase)
    return total / nodes


def random_hermitian(rng, n, scale=1.0):
    """GUE sample normalized to operator norm `scale`."""
    g = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    h = hermitian(g)
    norm = opnorm(h)
    return h * (scale / norm) if norm > 0 else h


def haar_unitary(rng, n):
    """Haar unitary via QR of a complex Ginibre matrix with phase fix."""
    g = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2)
    q, r = np.linalg.qr(g)
    d = np.diag(r)
    return q * (d / np.abs(d))


def matrix_to_json(x):
    x = as_matrix(x)
    return {"n": int(x.shape[0]),
            "re": x.real.ravel().tolist(),
            "im": x.imag.ravel().tolist()}


def matrix_from_json(obj):
    n = int(obj["n"])
    re = np.asarray(obj["re"], dtype=float)
    im = np.asarray(obj["im"], dtype=float)
    if re.size != n * n or im.size != n * n:
        raise ValueError("matrix JSON entry count does not match n")
    return (re + 1j * im).reshape(n, n)
