"""Inner flows t -> Ad e^{itH}, bump smoothing, and defect metrics."""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad

from . import numkernel as nk
from . import staralg as sa


def _mollifier(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


# normalization of exp(-1/(1-t^2)) on (-1, 1)
_MASS = quad(lambda s: float(_mollifier(s)), -1, 1, epsabs=1e-14, limit=200)[0]
BUMP_MAX = np.exp(-1.0) / _MASS
# f increases on (-1, 0) and decreases on (0, 1), so  ∫|f'| = 2 max f
BUMP_DERIV_L1 = 2.0 * BUMP_MAX
QUAD_TARGET = 1e-12
MAX_NODES = 2 ** 14


def bump(s):
    """Normalized base mollifier on (-1, 1)."""
    return _mollifier(s) / _MASS


@dataclass(frozen=True)
class BumpKernel:
    """Gauss-Legendre representation of f(t/n)/n for the standard mollifier."""

    scale: float = 1.0
    nodes: int = 129

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("kernel scale must be >= 1")

    @cached_property
    def _rule(self):
        s, w = leggauss(self.nodes)
        return s * self.scale, w * bump(s)

    @property
    def times(self):
        return self._rule[0]

    @property
    def weights(self):
        return self._rule[1]

    @property
    def support_radius(self):
        return float(self.scale)

    @property
    def total(self):
        return float(self.weights.sum())

    @property
    def deriv_l1(self):
        return BUMP_DERIV_L1 / self.scale

    def fourier(self, omega):
        """sum_j w_j e^{i t_j omega}, the quadrature of ∫ f(t) e^{itω} dt."""
        omega = np.asarray(omega, dtype=float)
        flat = omega.ravel()
        out = np.empty(flat.shape, dtype=complex)
        # chunked so the doubled space (N^4 frequencies) stays in memory
        step = max(1, 2 ** 21 // self.nodes)
        for i in range(0, flat.size, step):
            phase = np.multiply.outer(flat[i:i + step], self.times)
            out[i:i + step] = np.exp(1j * phase) @ self.weights
        return out.reshape(omega.shape)

    def refined(self):
        return BumpKernel(self.scale, 2 * self.nodes + 1)

    def adapted(self, omega_max):
        """Same kernel with enough nodes to resolve frequencies up to
        omega_max; Gauss-Legendre needs about omega_max * scale of them."""
        nodes = self.nodes
        while nodes < omega_max * self.scale:
            nodes = 2 * nodes + 1
        return self if nodes == self.nodes else BumpKernel(self.scale, nodes)

    def quad_error(self, omega):
        """Node-doubling estimate of the quadrature error at frequencies ω."""
        return float(np.max(np.abs(self.fourier(omega) - self.refined().fourier(omega))))

    def to_json(self):
        return {"family": "mollifier", "scale": self.scale, "nodes": self.nodes}

    @classmethod
    def from_json(cls, obj):
        return cls(float(obj["scale"]), int(obj["nodes"]))


@dataclass(frozen=True)
class InnerFlow:
    hamiltonian: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "hamiltonian", nk.hermitian(self.hamiltonian))

    @property
    def dim(self):
        return self.hamiltonian.shape[0]

    @cached_property
    def eig(self):
        return nk.herm_eig(self.hamiltonian)

    def unitary(self, t):
        return nk.expm_ith(self.hamiltonian, t, self.eig)

    def to_json(self):
        return {"H": nk.matrix_to_json(self.hamiltonian)}


def evolve(flow, t, x):
    """α_t(x) = e^{itH} x e^{-itH}."""
    u = flow.unitary(t)
    return u @ x @ nk.dag(u)


def derivation(flow, x):
    """δ(x) = i[H, x]."""
    return 1j * nk.comm(flow.hamiltonian, x)


def _gaps(flow):
    lam = flow.eig.values
    return lam[:, None] - lam[None, :]


def smooth(flow, kernel, x, with_error=False):
    """α_f(x) = ∫ f(t) α_t(x) dt by quadrature.

    In the eigenbasis of H the integral is the Schur product with the
    matrix of quadrature sums ∑_j w_j e^{i t_j (λ_a - λ_b)}. The node count
    grows with the spectral spread of H and is doubled until two successive
    rules agree; the last difference is the reported quadrature error.
    """
    v = flow.eig.vectors
    xe = nk.dag(v) @ x @ v
    om = _gaps(flow)
    k = kernel.adapted(float(np.max(np.abs(om))) if om.size else 0.0)
    vals = k.fourier(om)
    finer = k.refined()
    fine = finer.fourier(om)
    while np.max(np.abs(vals - fine)) > QUAD_TARGET and finer.nodes <= MAX_NODES:
        k, vals = finer, fine
        finer = k.refined()
        fine = finer.fourier(om)
    out = v @ (xe * vals) @ nk.dag(v)
    if not with_error:
        return out
    # |(Δ∘X)| <= max|Δ| ||X||_F <= max|Δ| sqrt(N) ||x||
    err = float(np.max(np.abs(vals - fine))) * np.sqrt(x.shape[0]) * nk.opnorm(x)
    return out, err


def smoothed_derivation_bound(kernel):
    return kernel.deriv_l1


def default_grid(points=65):
    return np.linspace(0.0, 1.0, points)


def _chebyshev_between(a, b, count=8):
    k = np.arange(count)
    x = np.cos((2 * k + 1) * np.pi / (2 * count))
    return 0.5 * (a + b) + 0.5 * (b - a) * x


def _grid_sup(evaluate, grid, refine):
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty grid")
    vals = [evaluate(t) for t in grid]
    uppers = [v.upper for v in vals]
    if refine and grid.size > 2:
        i = int(np.argmax(uppers))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        extra = _chebyshev_between(lo, hi)
        grid = np.concatenate([grid, extra])
        vals += [evaluate(t) for t in extra]
    best = max(range(len(vals)), key=lambda j: vals[j].upper)
    lower = max(v.lower for v in vals)
    mesh = float(np.max(np.diff(np.sort(grid)))) if grid.size > 1 else 0.0
    return vals, best, lower, grid, mesh


def _centered_norm(flow):
    h = flow.hamiltonian
    return nk.opnorm(h - np.trace(h) / h.shape[0] * nk.eye(h.shape[0]))


def invariance_defect(flow, b, grid=None, trials=64, seed=0, refine=True):
    """Certified sup over the grid of dist(α_t(B), B).

    `pad` = 2 ||H - τ(H)|| · mesh bounds how much the distance can move
    between grid points; it is reported next to the grid value.
    """
    grid = default_grid() if grid is None else grid

    def at(t):
        return sa.dist_estimate(b.conjugate(flow.unitary(t)), b, trials, seed)

    vals, best, lower, grid, mesh = _grid_sup(at, grid, refine)
    return sa.SubalgDistance(float(lower), float(vals[best].upper), vals[best].witness,
                             float(grid[best]), 2 * _centered_norm(flow) * mesh)


def _pointwise_at(flow, d, t, trials, rng):
    u = flow.unitary(t)
    cols = []
    for _, _, _, e in d.units():
        cols.append((u @ e @ nk.dag(u) - e).ravel())
    cols = np.stack(cols, axis=1)
    top = float(np.sqrt(max(nk.herm_eig(nk.dag(cols) @ cols).values[-1], 0.0)))
    upper = top * np.sqrt(sum(blk.size for blk in d.blocks))
    xs = sa._extreme_samples(d, rng, trials)
    lower = float(np.max(sa._batch_opnorm(u @ xs @ nk.dag(u) - xs)))
    return sa.SubalgDistance(float(lower), float(max(upper, lower)))


def pointwise_defect(flow, d, grid=None, trials=64, seed=0, refine=True):
    """Certified sup over the grid and D's unit ball of ||α_t(x) - x||."""
    grid = default_grid() if grid is None else grid
    rng = np.random.default_rng(seed)
    vals, best, lower, grid, mesh = _grid_sup(
        lambda t: _pointwise_at(flow, d, t, trials, rng), grid, refine)
    return sa.SubalgDistance(float(lower), float(vals[best].upper), None, float(grid[best]),
                             2 * _centered_norm(flow) * mesh)
