"""Cocycles of inner flows in the canonical form u_t = w e^{it(H+k)} w* e^{-itH}.

Coboundaries have k = 0, differentiable cocycles have w = 1, and products
stay in the same form, so a cocycle is stored as the triple (H, w, k) and
never as a sampled path.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import flowcore as fc
from . import numkernel as nk
from .errors import CocycleTooLarge, DimensionMismatch, PhaseUndefined, PreconditionError


@dataclass(frozen=True)
class CocycleMetrics:
    sup_dev: float
    k_norm: float
    w_dev: float

    def to_dict(self):
        return {"sup_dev": self.sup_dev, "k_norm": self.k_norm, "w_dev": self.w_dev}


@dataclass(frozen=True)
class Cocycle:
    hamiltonian: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    k: np.ndarray = field(repr=False)

    def __post_init__(self):
        h = nk.hermitian(self.hamiltonian)
        w = nk.as_matrix(self.w)
        k = nk.hermitian(self.k)
        if not (h.shape == w.shape == k.shape):
            raise DimensionMismatch("H, w and k must have the same shape")
        object.__setattr__(self, "hamiltonian", h)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "k", k)

    @classmethod
    def trivial(cls, h):
        h = nk.hermitian(h)
        n = h.shape[0]
        return cls(h, nk.eye(n), np.zeros((n, n), dtype=complex))

    @classmethod
    def coboundary(cls, h, w):
        h = nk.hermitian(h)
        return cls(h, w, np.zeros_like(h))

    @classmethod
    def differentiable(cls, h, k):
        h = nk.hermitian(h)
        return cls(h, nk.eye(h.shape[0]), k)

    @property
    def dim(self):
        return self.hamiltonian.shape[0]

    @property
    def base(self):
        return fc.InnerFlow(self.hamiltonian)

    @cached_property
    def _eig_base(self):
        return nk.herm_eig(self.hamiltonian)

    @cached_property
    def _eig_shifted(self):
        return nk.herm_eig(self.hamiltonian + self.k)

    @cached_property
    def perturbed_hamiltonian(self):
        return nk.hermitian(self.w @ (self.hamiltonian + self.k) @ nk.dag(self.w))

    def to_json(self):
        return {"w": nk.matrix_to_json(self.w), "k": nk.matrix_to_json(self.k),
                "H": nk.matrix_to_json(self.hamiltonian)}

    @classmethod
    def from_json(cls, obj):
        return cls(nk.matrix_from_json(obj["H"]), nk.matrix_from_json(obj["w"]),
                   nk.matrix_from_json(obj["k"]))


def eval(c, t):
    """u_t = w e^{it(H+k)} w* e^{-itH}."""
    inner = nk.expm_ith(None, t, c._eig_shifted)
    back = nk.expm_ith(None, -t, c._eig_base)
    return c.w @ inner @ nk.dag(c.w) @ back


def eval_grid(c, grid):
    return [eval(c, t) for t in grid]


def identity_residual(c, pairs):
    """max ||u_s α_s(u_t) - u_{s+t}|| over the (s, t) pairs."""
    flow = c.base
    worst = 0.0
    for s, t in pairs:
        lhs = eval(c, s) @ fc.evolve(flow, s, eval(c, t))
        worst = max(worst, nk.opnorm(lhs - eval(c, s + t)))
    return worst


def metrics(c, grid=None):
    grid = fc.default_grid() if grid is None else grid
    one = nk.eye(c.dim)
    sup = max(nk.opnorm(eval(c, t) - one) for t in grid)
    return CocycleMetrics(float(sup), nk.opnorm(c.k), nk.opnorm(c.w - one))


def perturb(c):
    """The flow Ad u_t ∘ α_t, an inner flow with Hamiltonian w(H+k)w*."""
    return fc.InnerFlow(c.perturbed_hamiltonian)


def compose(outer, inner, tol=nk.TOL.construct):
    """The cocycle t -> outer_t inner_t over inner's base flow.

    With H' = w1(H+k1)w1* the base of `outer`, the product is again in
    canonical form with W = w2 w1 and K = k1 + w1* k2 w1.
    """
    hp = inner.perturbed_hamiltonian
    scale = max(1.0, nk.opnorm(hp))
    gap = nk.opnorm(outer.hamiltonian - hp)
    if gap > tol * scale * 100:
        raise DimensionMismatch("outer cocycle is not over the perturbed flow",
                                mismatch=gap)
    w = outer.w @ inner.w
    k = inner.k + nk.dag(inner.w) @ outer.k @ inner.w
    return Cocycle(inner.hamiltonian, w, k)


def compose_all(cocycles):
    """Compose a list given innermost first."""
    total = cocycles[0]
    for c in cocycles[1:]:
        total = compose(c, total)
    return total


def _support_sup(c, kernel):
    one = nk.eye(c.dim)
    return max(nk.opnorm(eval(c, t) - one) for t in kernel.times)


def resplit_small(c, kernel=None, delta=0.1):
    """Rewrite c as (v, k') with v the polar part of ∫ f(t) u_t dt.

    Evaluation is unchanged because v(H+k')v* = H'. Raises `CocycleTooLarge`
    when the cocycle is not uniformly within `delta` of 1 on the kernel's
    support.
    """
    kernel = fc.BumpKernel() if kernel is None else kernel
    spread = np.ptp(c._eig_shifted.values) + np.ptp(c._eig_base.values)
    kernel = kernel.adapted(float(spread))
    sup = _support_sup(c, kernel)
    if sup >= delta:
        raise CocycleTooLarge("cocycle too far from 1 on the kernel support",
                              sup_dev=sup, delta=delta)
    m = sum(wj * eval(c, tj) for tj, wj in zip(kernel.times, kernel.weights))
    try:
        v = nk.polar(m).unitary
    except PreconditionError as exc:
        raise CocycleTooLarge("smoothed cocycle is singular", **exc.info) from exc
    hp = c.perturbed_hamiltonian
    k = nk.dag(v) @ hp @ v - c.hamiltonian
    return Cocycle(c.hamiltonian, v, k)


def scalar_distance(u):
    """inf over complex λ of ||u - λ|| for a unitary u.

    If the eigenphases fit in an arc of length θ < π the answer is sin(θ/2);
    otherwise 0 lies in the convex hull of the spectrum and the answer is 1.
    """
    phases = np.sort(np.angle(np.linalg.eigvals(u)))
    gaps = np.diff(np.concatenate([phases, [phases[0] + 2 * np.pi]]))
    arc = 2 * np.pi - gaps.max()
    return float(np.sin(arc / 2)) if arc < np.pi else 1.0


@dataclass(frozen=True)
class PhaseFit:
    p: float
    grid: np.ndarray = field(repr=False)
    phases: np.ndarray = field(repr=False)
    scalar_dev: float  # sup_t inf_λ ||u_t - λ||
    phase_dev: float  # sup_t ||u_t - e^{ipt}||
    additivity: float  # max |f(s+t) - f(s) - f(t)| over grid pairs
    bound: float

    def to_dict(self):
        return {"p": self.p, "scalar_dev": self.scalar_dev,
                "phase_dev": self.phase_dev, "additivity": self.additivity,
                "bound": self.bound}


def _phase_grid(grid, mesh=1 / 64):
    pts = np.unique(np.concatenate([np.asarray(grid, dtype=float),
                                    np.linspace(0, 1, int(round(1 / mesh)) + 1)]))
    return pts[(pts >= 0) & (pts <= 1)]


def scalar_phase(c, grid=None, delta=0.1, min_trace=1e-6):
    """Fit u_t ≈ e^{ipt} for a cocycle that stays near the scalars.

    The continuous argument f of τ(u_t) is followed along the grid (mesh at
    most 1/64, refined if needed) and p = f(1).
    """
    if not 0 < delta < 1 / 6:
        raise PreconditionError("scalar_phase needs 0 < delta < 1/6", delta=delta)
    grid = _phase_grid(fc.default_grid() if grid is None else grid)
    us = eval_grid(c, grid)
    dev = max(scalar_distance(u) for u in us)
    if dev >= delta:
        raise PreconditionError("cocycle is not within delta of the scalars",
                                scalar_dev=dev, delta=delta)
    traces = np.array([np.trace(u) / c.dim for u in us])
    if np.min(np.abs(traces)) < min_trace:
        raise PhaseUndefined("normalized trace vanishes on the grid",
                             t=float(grid[np.argmin(np.abs(traces))]))
    raw = np.angle(traces)
    steps = np.angle(np.exp(1j * np.diff(raw)))
    if np.any(np.abs(steps) > np.pi / 2):
        i = int(np.argmax(np.abs(steps)))
        raise PhaseUndefined("phase jumps by more than pi/2 between grid points",
                             t=float(grid[i + 1]), jump=float(steps[i]))
    # grid starts at t = 0 where u_0 = 1, so f(0) = 0
    f = np.concatenate([[0.0], np.cumsum(steps)])
    p = float(f[-1])
    one = nk.eye(c.dim)
    phase_dev = max(nk.opnorm(u - np.exp(1j * p * t) * one) for u, t in zip(us, grid))
    index = {round(t * 64): i for i, t in enumerate(grid) if abs(t * 64 - round(t * 64)) < 1e-12}
    add = 0.0
    for a, i in index.items():
        for b, j in index.items():
            if a + b in index:
                add = max(add, abs(f[index[a + b]] - f[i] - f[j]))
    bound = 3 * np.arcsin(3 * delta) + delta
    return PhaseFit(p, grid, f, dev, float(phase_dev), float(add), float(bound))
