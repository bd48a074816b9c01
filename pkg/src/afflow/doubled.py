"""The trace representation of M_N ⊗ M_N and the driver for a single factor.

M_N is a Hilbert space for <x, y> = τ(y* x), and x ⊗ y acts by
ξ -> x ξ y^t. With row-major vectorization this operator is kron(x, y), the
unit vector "1" is vec(I)/√N, and the doubled Hamiltonian is
kron(H, 1) - kron(1, H^T).
"""

from dataclasses import dataclass, field, replace
from time import perf_counter
from typing import NamedTuple

import numpy as np

from . import cocycle as cc
from . import correction as cr
from . import flowcore as fc
from . import numkernel as nk
from . import staralg as sa
from .errors import (
    AmbiguousRotation,
    DefectTooLarge,
    GroundDegenerate,
    InternalBoundViolation,
    PreconditionError,
    WindowEmpty,
    staged,
)

WINDOW_FLOOR = 1e-10


@dataclass(frozen=True)
class TraceRep:
    n: int

    def rho(self, x, y):
        return np.kron(x, y)

    def pi(self, x):
        return np.kron(x, np.eye(self.n))

    @property
    def one(self):
        return np.eye(self.n, dtype=complex).ravel() / np.sqrt(self.n)

    def vector(self, xi):
        """Matrix ξ as a unit-normalized-trace vector."""
        return np.asarray(xi, dtype=complex).ravel() / np.sqrt(self.n)

    def matrix(self, v):
        return np.asarray(v).reshape(self.n, self.n) * np.sqrt(self.n)

    def omega(self, x, y):
        one = self.one
        return np.vdot(one, self.rho(x, y) @ one)

    def minimal_projection(self, b):
        """K^{-1} Σ_ij e_ij ⊗ (e_ji)^t for a factor B."""
        blk = b.blocks[0]
        k = blk.size
        out = 0
        for i in range(k):
            for j in range(k):
                out = out + self.rho(blk.unit(i, j), blk.unit(j, i).T)
        return out / k


def doubled_hamiltonian(H):
    H = nk.hermitian(H)
    n = H.shape[0]
    one = np.eye(n)
    return nk.hermitian(np.kron(H, one) - np.kron(one, H.T))


def doubled_subalgebra(b):
    """ρ(B ⊗ B^t) = kron(B, conj B), presented with units ((i,j), (α,β))."""
    if not b.is_factor:
        raise PreconditionError("doubling needs a single-block subalgebra")
    u = sa.tensor_frame(b)
    k, m = b.blocks[0].size, b.blocks[0].mult
    n = b.ambient_dim
    big = np.kron(u, u.conj()).reshape(n * n, k, m, k, m)
    basis = big.transpose(0, 1, 3, 2, 4).reshape(n * n, n * n)
    return sa.from_block_partition(n * n, [(k * k, m * m)], basis)


@dataclass(frozen=True)
class GroundData:
    E0: float
    E1: float
    vector: np.ndarray = field(repr=False)
    window_vector: np.ndarray = field(default=None, repr=False)
    eps_window: float = None
    degenerate: int = 1


def _fix_phase(v):
    i = int(np.argmax(np.abs(v)))
    out = v * (abs(v[i]) / v[i])
    out[i] = abs(v[i])
    return out


def ground_vector(K, gap_tol=1e-8, tie_break=False):
    """Lowest eigenpair; the largest coordinate is made real positive.

    A degenerate ground space raises `GroundDegenerate` unless `tie_break`
    is set, in which case the projection of the first standard basis vector
    with non-negligible weight is used.
    """
    eig = nk.herm_eig(K)
    vals = eig.values
    dim = int(np.sum(vals - vals[0] < gap_tol))
    if dim == 1:
        vec = eig.vectors[:, 0]
    elif not tie_break:
        raise GroundDegenerate("ground space is degenerate", dimension=dim)
    else:
        space = eig.vectors[:, :dim]
        weights = np.linalg.norm(space, axis=1)
        idx = int(np.argmax(weights > 1e-6))
        vec = space @ space[idx].conj()
        vec = vec / np.linalg.norm(vec)
    return GroundData(float(vals[0]), float("nan"), _fix_phase(vec), degenerate=dim)


def product_factor_check(phi, b):
    """Schmidt split across B ⊗ B'. Returns (Φ1, Φ2, 1 - s_0^2)."""
    xi, eta, defect, _ = cr.product_split(np.asarray(phi, dtype=complex), b)
    return xi, eta, defect


def window_vector(K, phi, E1, eps, tol=1e-10, eig=None):
    """Normalized projection of Φ onto the spectral window [-E1, -E1 + eps] of K."""
    eig = nk.herm_eig(K) if eig is None else eig
    mask = (eig.values >= -E1 - tol) & (eig.values <= -E1 + eps)
    vecs = eig.vectors[:, mask]
    proj = vecs @ (nk.dag(vecs) @ phi)
    nrm = float(np.linalg.norm(proj))
    if nrm <= eps:
        raise WindowEmpty("window projection nearly annihilates Φ", norm=nrm, eps=eps)
    return proj / nrm


def _tensor(vec, u, k, m):
    n = u.shape[0]
    x = np.asarray(vec).reshape(n, n)
    return (nk.dag(u) @ x @ u).reshape(k, m, k, m)


def reduced_families(phi, b):
    """Eigenbases of Φ's reduced densities on the B^t and (A∩B')^t indices."""
    u = sa.tensor_frame(b)
    k, m = b.blocks[0].size, b.blocks[0].mult
    t = _tensor(phi, u, k, m)
    rj = np.einsum("iajb,iakb->jk", t, t.conj())
    rb = np.einsum("iajb,iajc->bc", t, t.conj())
    # largest weight first
    ej = nk.herm_eig(rj)
    eb = nk.herm_eig(rb)
    return ej.vectors[:, ::-1], eb.vectors[:, ::-1]


@dataclass(frozen=True)
class Localization:
    index: tuple
    phi_loc: np.ndarray = field(repr=False)
    psi_loc: np.ndarray = field(repr=False)
    dist2: float
    table: np.ndarray = field(repr=False)


def _localize(t, a, bvec, u):
    v = np.einsum("iajb,j,b->ia", t, a.conj(), bvec.conj()).ravel()
    return u @ v


def projection_search(phi, psi, b, families=None, floor=1e-12):
    """Minimize ||Φ_loc - Ψ_loc||^2 over rank-one p1 ⊗ p2 in the second factor.

    Φ_loc is the normalized (1 ⊗ p1p2)Φ read as a vector of C^N. Pairs where
    either localization vanishes are skipped; ties go to the smaller index.
    """
    u = sa.tensor_frame(b)
    k, m = b.blocks[0].size, b.blocks[0].mult
    P1, P2 = reduced_families(phi, b) if families is None else families
    tp, ts = _tensor(phi, u, k, m), _tensor(psi, u, k, m)
    table = np.full((P1.shape[1], P2.shape[1]), np.inf)
    best = None
    for r in range(P1.shape[1]):
        for s in range(P2.shape[1]):
            x = _localize(tp, P1[:, r], P2[:, s], u)
            y = _localize(ts, P1[:, r], P2[:, s], u)
            nx, ny = np.linalg.norm(x), np.linalg.norm(y)
            if nx <= floor or ny <= floor:
                continue
            d2 = float(np.linalg.norm(x / nx - y / ny) ** 2)
            table[r, s] = d2
            if best is None or d2 < best[0]:
                best = (d2, r, s, x / nx, y / ny)
    if best is None:
        raise InternalBoundViolation("no localizing pair found")
    d2, r, s, x, y = best
    return Localization((r, s), x, y, d2, table)


def kadison_rotate(xi, eta, tol=1e-12):
    """Unitary equal to 1 off span{ξ, η} that maps ξ to η.

    On the plane it is the phase e^{iθ}, θ = arg<ξ,η>, times the real
    rotation carrying ξ to e^{-iθ}η.
    """
    xi = np.asarray(xi, dtype=complex)
    eta = np.asarray(eta, dtype=complex)
    xi = xi / np.linalg.norm(xi)
    eta = eta / np.linalg.norm(eta)
    n = xi.shape[0]
    c = np.vdot(xi, eta)
    if abs(c) <= tol:
        raise AmbiguousRotation("vectors are orthogonal", overlap=float(abs(c)))
    ph = c / abs(c)
    eta1 = eta / ph
    cos = float(np.vdot(xi, eta1).real)
    perp = eta1 - cos * xi
    sin = float(np.linalg.norm(perp))
    one = nk.eye(n)
    if sin <= tol:
        return one + (ph - 1) * np.outer(xi, xi.conj())
    zeta = perp / sin
    basis = np.stack([xi, zeta], axis=1)
    rot = np.array([[cos, -sin], [sin, cos]]) * ph
    return one + basis @ (rot - np.eye(2)) @ nk.dag(basis)


def eigen_correction(H, psi):
    """Hermitian k with (H + k)ψ = <Hψ,ψ>ψ: k = -(rψ* + ψr*), r = (H - <Hψ,ψ>)ψ."""
    psi = psi / np.linalg.norm(psi)
    mean = np.vdot(psi, H @ psi).real
    r = H @ psi - mean * psi
    return nk.hermitian(-(np.outer(r, psi.conj()) + np.outer(psi, r.conj())))


class PropAOutcome(NamedTuple):
    cocycle: cc.Cocycle
    diagnostics: dict

    @property
    def u(self):
        return nk.dag(self.cocycle.w)

    @property
    def h(self):
        return self.cocycle.k


def _conjugation_probe(H, b, delta, points=9):
    flow = fc.InnerFlow(H)
    rows = []
    for t in np.linspace(0, 1, points):
        near = b.conjugate(flow.unitary(t))
        try:
            v = cr.conjugate_subalgebra(b, near)
        except PreconditionError as exc:
            rows.append({"t": float(t), "error": type(exc).__name__})
            continue
        dev = nk.opnorm(v - nk.eye(b.ambient_dim))
        rows.append({"t": float(t), "v_dev": dev,
                     "exact": sa.dist_estimate(near.conjugate(v), b, 4).upper})
    devs = [r["v_dev"] for r in rows if "v_dev" in r]
    worst = max(devs) if devs else float("nan")
    return {
        "rows": rows,
        "max_v_dev": worst,
        "bound_120": 120 * np.sqrt(delta),
        "doubled_bound": 4 * worst,
        "bound_480": 480 * np.sqrt(delta),
        "within": bool(devs) and 4 * worst <= 480 * np.sqrt(delta),
    }


def fix_prop_a(H, b, kernel=None, config=cr.DEFAULT_CONFIG):
    """(u, h) with u* e^{it(H+h)} u leaving the factor B invariant.

    Returned as the cocycle (u*, h) over H together with a stage trace.
    """
    H = nk.hermitian(H)
    kernel = fc.BumpKernel() if kernel is None else kernel
    if not b.is_factor:
        raise PreconditionError("fix_prop_a needs a single-block subalgebra")
    n = H.shape[0]
    k, m = b.blocks[0].size, b.blocks[0].mult
    t0 = perf_counter()
    diag = {"stage": "fix_prop_a", "spec": [k, m]}
    if k == 1 or m == 1:
        diag["trivial"] = True
        return PropAOutcome(cc.Cocycle.trivial(H), diag)
    flow = fc.InnerFlow(H)
    if config.check_defect:
        with staged("precheck"):
            before = fc.invariance_defect(flow, b, config.grid, config.trials, config.seed)
            diag["defect_before"] = before.to_dict()
            if before.upper >= config.delta_admissible:
                raise DefectTooLarge("invariance defect above the admissible threshold",
                                     defect=before.upper, delta=config.delta_admissible)
            delta = before.upper
    else:
        delta = float("nan")
    rep = TraceRep(n)
    with staged("trace_rep"):
        bd = doubled_subalgebra(b)
        one = rep.one
        span = np.stack([bd.blocks[0].unit(i, j) @ one for i in range(k * k)
                         for j in range(k * k)], axis=1)
        rank = int(np.linalg.matrix_rank(span, tol=1e-8))
        diag["cyclic_rank"] = rank
        if rank != k * k:
            raise InternalBoundViolation("ρ(B ⊗ B^t)1 has the wrong dimension", rank=rank)
    diag["conjugation"] = _conjugation_probe(H, b, delta)
    Kd = doubled_hamiltonian(H)
    with staged("doubled"):
        dcfg = replace(config, check_defect=False)
        cd, ddiag = cr.fix_invariant(Kd, bd, kernel, one, dcfg)
    diag["doubled"] = {key: ddiag[key] for key in ("metrics", "split_residual",
                                                   "state_residual", "phases")
                       if key in ddiag}
    Kp = cd.perturbed_hamiltonian
    hnorm = nk.opnorm(cd.k)
    udev = nk.opnorm(cd.w - nk.eye(n * n))
    spec = nk.herm_eig(H).values
    E1 = float(spec[-1] - spec[0])
    with staged("ground"):
        gd = ground_vector(Kp, tie_break=True)
    # the bracket is stated for min Spec(H) = 0, which K_d does not see
    E0 = gd.E0
    bracket = (-E1 - hnorm - 1e-10 <= E0 <= -E1 + hnorm + 1e-10)
    diag["ground"] = {"E0": E0, "E1": E1, "h_norm": hnorm, "u_dev": udev,
                      "bracket_ok": bool(bracket), "degenerate": gd.degenerate}
    if not bracket:
        raise InternalBoundViolation("ground energy outside its bracket", E0=E0, E1=E1,
                                     h_norm=hnorm)
    phi = gd.vector
    with staged("product"):
        _, _, pdef = product_factor_check(phi, bd)
        diag["ground"]["product_defect"] = pdef
        if pdef > config.product_tol:
            raise PreconditionError("ground vector is not a product", defect=pdef)
    keig = nk.herm_eig(Kd)
    excess = float(np.vdot(phi, Kd @ phi).real + E1)
    eps_default = float(np.sqrt(hnorm + udev * nk.opnorm(Kd)))
    eps_energy = float(np.sqrt(max(excess, 0.0)))
    eps = {"max": max(eps_default, eps_energy), "energy": eps_energy,
           "default": eps_default}[config.window_rule]
    # an exactly invariant input gives eps = 0, and the strict search bound needs room
    eps = max(eps, WINDOW_FLOOR)
    diag["window"] = {"eps_default": eps_default, "energy_excess": excess, "eps": eps,
                      "rule": config.window_rule}
    if eps > 1 / 3:
        raise PreconditionError("spectral window too wide", eps=eps)
    with staged("window"):
        psi = window_vector(Kd, phi, E1, eps, eig=keig)
    overlap = float(np.vdot(phi, psi).real)
    diag["window"]["overlap"] = overlap
    if overlap <= 1 - eps:
        raise InternalBoundViolation("window vector too far from Φ", overlap=overlap,
                                     eps=eps)
    with staged("projection_search"):
        loc = projection_search(phi, psi, b)
    diag["search"] = {"index": list(loc.index), "dist2": loc.dist2, "bound": 3 * eps}
    if loc.dist2 >= 3 * eps:
        raise InternalBoundViolation("localized vectors too far apart",
                                     dist2=loc.dist2, bound=3 * eps)
    with staged("rotate"):
        v = kadison_rotate(loc.phi_loc, loc.psi_loc)
    kc = eigen_correction(H, loc.psi_loc)
    ca = cc.Cocycle(H, nk.dag(v), kc)
    diag["rotation"] = {"v_dev": nk.opnorm(v - nk.eye(n)), "k_norm": nk.opnorm(kc),
                        "rotation_residual": float(np.linalg.norm(v @ loc.phi_loc - loc.psi_loc))}
    with staged("invariant"):
        cb, bdiag = cr.fix_invariant(ca.perturbed_hamiltonian, b, kernel, loc.phi_loc, config)
    total = cc.compose(cb, ca)
    final = total.perturbed_hamiltonian
    split = cr.invariance_split_residual(final, b)
    m_total = cc.metrics(total, config.grid)
    diag.update({
        "invariant": {key: bdiag.get(key) for key in ("metrics", "split_residual",
                                                      "phases", "product_defect")},
        "split_residual": split,
        "metrics": m_total.to_dict(),
        "sup_dev_vs_3eps": {"sup_dev": m_total.sup_dev, "bound": 3 * eps},
        "seconds": perf_counter() - t0,
    })
    if split > 1e-8 * max(nk.opnorm(final), 1.0):
        raise InternalBoundViolation("final flow does not leave B invariant", split=split)
    return PropAOutcome(total, diag)
