"""Repair constructions: make an approximately invariant flow exactly invariant.

Each driver returns a cocycle over the flow it was given, so stages chain
through `cocycle.compose` and every diagnostic refers to the original
Hamiltonian. The corrections are algebraic identities; only their norms
depend on how far from invariant the input was.
"""

from dataclasses import dataclass, field
from itertools import product
from time import perf_counter
from typing import NamedTuple

import numpy as np
from scipy.linalg import logm

from . import cocycle as cc
from . import flowcore as fc
from . import numkernel as nk
from . import staralg as sa
from .errors import (
    BudgetExhausted,
    DefectTooLarge,
    DimensionMismatch,
    DriftTooLarge,
    InternalBoundViolation,
    NotInvariant,
    PreconditionError,
    SpectralBandViolation,
    staged,
)


@dataclass(frozen=True)
class FixConfig:
    """Thresholds for the drivers. All of them are policy, not derived."""

    delta_admissible: float = 1e-2
    band_guard: float = 1e-6
    drift_max: float = 0.25
    product_tol: float = 1e-8
    trials: int = 64
    seed: int = 0
    grid_points: int = 65
    budget: float = None  # total sup_dev budget for fix_tower
    strict_budget: bool = False
    check_defect: bool = True
    riesz_check: bool = False
    # spectral window width in the doubled driver: "max", "energy" or "default"
    window_rule: str = "max"

    @property
    def grid(self):
        return fc.default_grid(self.grid_points)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


DEFAULT_CONFIG = FixConfig()


class FixOutcome(NamedTuple):
    cocycle: cc.Cocycle
    diagnostics: dict


# ---------------------------------------------------------------------------
# invariant projections


@dataclass(frozen=True)
class ProjectionFix:
    u: np.ndarray = field(repr=False)
    h: np.ndarray = field(repr=False)
    F: np.ndarray = field(repr=False)
    smoothed: np.ndarray = field(repr=False)
    diagnostics: dict

    def cocycle(self, hamiltonian):
        """The cocycle (u*, h): its flow has Hamiltonian u*(H+h)u and keeps E."""
        return cc.Cocycle(hamiltonian, nk.dag(self.u), self.h)


def fix_projection(H, E, kernel=None, pinned=None, riesz_check=False,
                   drift_max=0.25):
    """Rotate E onto the spectral projection F of its smoothed orbit.

    With E_n = α_f(E) and F = 1_{[1/2,∞)}(E_n), the unitary u is the polar
    part of z = FE + (1-F)(1-E), so u E u* = F, and h = -(1-F)HF - FH(1-F)
    makes H + h commute with F. If Ω is pinned with EΩ = Ω and HΩ ∝ Ω then
    uΩ = Ω and hΩ = 0.
    """
    H = nk.hermitian(H)
    E = nk.hermitian(E)
    kernel = fc.BumpKernel() if kernel is None else kernel
    n = H.shape[0]
    one = nk.eye(n)
    flow = fc.InnerFlow(H)
    en, quad_tol = fc.smooth(flow, kernel, E, with_error=True)
    en = nk.hermitian(en)
    drift = nk.opnorm(en - E)
    if drift >= drift_max:
        raise DriftTooLarge("smoothed projection drifted too far", drift=drift,
                            limit=drift_max)
    eig = nk.herm_eig(en)
    F = nk.spectral_projection(en, 0.5, eig=eig)
    z = F @ E + (one - F) @ (one - E)
    u = nk.polar(z).unitary
    h = nk.hermitian(-(one - F) @ H @ F - F @ H @ (one - F))
    resid = nk.opnorm(nk.comm(H + h, F))
    conj_resid = nk.opnorm(u @ E @ nk.dag(u) - F)
    scale = nk.opnorm(H) + nk.opnorm(h)
    if resid > nk.TOL.construct * max(scale, 1.0) or conj_resid > nk.TOL.construct * 10:
        raise InternalBoundViolation("projection fix is not exact",
                                     exact_residual=resid, conj_residual=conj_resid)
    diag = {
        "u_dev": nk.opnorm(u - one),
        "h_norm": nk.opnorm(h),
        "comm_En": nk.opnorm(1j * nk.comm(H, en)),
        "comm_F": nk.opnorm(1j * nk.comm(H, F)),
        "exact_residual": resid,
        "conj_residual": conj_resid,
        "drift": drift,
        "quad_tol": quad_tol,
        "spectral_gap": float(np.min(np.abs(eig.values - 0.5))),
    }
    if riesz_check:
        r = nk.riesz_projection(en, 1.0, 0.5, nodes=64)
        diag["riesz_vs_eig"] = nk.opnorm(r - F)
    if pinned is not None:
        om = np.asarray(pinned, dtype=complex)
        diag["pinned_u"] = nk.opnorm(u @ om - om)
        diag["pinned_h"] = nk.opnorm(h @ om)
    return ProjectionFix(u, h, F, en, diag)


# ---------------------------------------------------------------------------
# abelian subalgebras: orthogonalization, implementation, averaging


def _smoothstep(x):
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
    b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


def band_g(t):
    """C^∞ step: 0 on (-∞, 1/3], 1 on [2/3, ∞)."""
    return _smoothstep(3.0 * np.asarray(t, dtype=float) - 1.0)


def band_g1(t):
    """t·g(t): 0 on [0, 1/3] and t on [2/3, 1]."""
    t = np.asarray(t, dtype=float)
    return t * band_g(t)


def _check_band(eig, guard, index):
    vals = eig.values
    bad = (vals > 1 / 3 - guard) & (vals < 2 / 3 + guard)
    if bad.any():
        raise SpectralBandViolation("smoothed projection has spectrum in the middle band",
                                    index=index, eigenvalue=float(vals[bad][0]))


def _projections(e):
    e = [nk.hermitian(p) for p in e]
    if not e:
        raise DimensionMismatch("empty projection list")
    n = e[0].shape[0]
    total = sum(e)
    if nk.opnorm(total - nk.eye(n)) > 1e-8:
        raise PreconditionError("projections do not sum to 1")
    return e


def _orthogonalize(mats, f, guard, check):
    eigs = [nk.herm_eig(a) for a in mats]
    if check:
        for i, eig in enumerate(eigs):
            _check_band(eig, guard, i)
    parts = [nk.matrix_function(a, f, eig=eig) for a, eig in zip(mats, eigs)]
    b = sum(parts)
    beig = nk.herm_eig(b)
    if beig.values[0] <= nk.TOL.oracle:
        raise SpectralBandViolation("orthogonalizing sum is singular",
                                    smallest=float(beig.values[0]))
    root = nk.matrix_function(b, lambda x: x ** -0.5, eig=beig)
    return [nk.hermitian(root @ p @ root) for p in parts]


def orthogonalize_abelian(H, kernel, e, variant="g1", guard=1e-6):
    """q_i = b^{-1/2} g1(a_i) b^{-1/2} with a_i = α_f(e_i), b = Σ g1(a_j).

    With every a_i spectrally inside [0,1/3) ∪ (2/3,1] and the ranks of the
    spectral projections adding up to N, the q_i are exactly orthogonal
    projections summing to 1. `variant="g"` uses the indicator-like g instead
    of g1.
    """
    e = _projections(e)
    flow = fc.InnerFlow(H)
    kernel = fc.BumpKernel() if kernel is None else kernel
    a = [nk.hermitian(fc.smooth(flow, kernel, p)) for p in e]
    f = {"g1": band_g1, "g": band_g}[variant]
    return _orthogonalize(a, f, guard, True)


def orthogonality_residual(q):
    n = q[0].shape[0]
    worst = nk.opnorm(sum(q) - nk.eye(n))
    for i, qi in enumerate(q):
        worst = max(worst, nk.opnorm(qi @ qi - qi))
        for qj in q[i + 1:]:
            worst = max(worst, nk.opnorm(qi @ qj))
    return worst


def smoothing_deviation(H, kernel, e, trials=64, seed=0):
    """Sampled ||(α_f - id)|span e||, maximized over unimodular coefficients.

    Every sign pattern is tried for up to 12 projections, random phases
    beyond that and in addition.
    """
    flow = fc.InnerFlow(H)
    d = [nk.hermitian(fc.smooth(flow, kernel, p)) - p for p in e]
    best = max(nk.opnorm(x) for x in d)
    if len(d) <= 12:
        for s in product((1.0, -1.0), repeat=len(d) - 1):
            best = max(best, nk.opnorm(d[0] + sum(si * x for si, x in zip(s, d[1:]))))
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        ph = np.exp(2j * np.pi * rng.random(len(d)))
        best = max(best, nk.opnorm(sum(p * x for p, x in zip(ph, d))))
    return float(best)


def implement_inner(e, q, tol=0.5):
    """Unitary w with w e_i w* = q_i, the polar part of v = Σ q_i e_i."""
    e = _projections(e)
    q = _projections(q)
    if len(e) != len(q):
        raise DimensionMismatch("lists differ in length")
    for i, (ei, qi) in enumerate(zip(e, q)):
        re, rq = int(round(np.trace(ei).real)), int(round(np.trace(qi).real))
        if re != rq:
            raise DimensionMismatch("rank mismatch", index=i, rank_e=re, rank_q=rq)
        if nk.opnorm(ei - qi) >= tol:
            raise PreconditionError("projections too far apart", index=i,
                                    distance=nk.opnorm(ei - qi))
    v = sum(qi @ ei for ei, qi in zip(e, q))
    return nk.polar(v).unitary


def _as_projection_list(d1):
    if isinstance(d1, sa.MatrixSubalgebra):
        if not d1.is_abelian:
            raise PreconditionError("averaging needs an abelian subalgebra")
        return d1.diagonal_units()
    return _projections(d1)


def average_out_derivation(H, d1):
    """h with [ih, x] = δ(x) on the abelian algebra D1.

    The Haar average ∫ δ(u)u* dν(u) over the torus of D1 equals
    i(H - Σ q_j H q_j), since averaging u H u* over independent phases on
    the q_j kills the off-diagonal blocks.
    """
    q = _as_projection_list(d1)
    H = nk.hermitian(H)
    return nk.hermitian(H - sum(p @ H @ p for p in q))


def haar_average_derivation(H, d1, samples=100_000, seed=0, batch=5000):
    """Monte-Carlo estimate of -i ∫ δ(u)u* dν(u) with its standard error."""
    q = _as_projection_list(d1)
    H = nk.hermitian(H)
    rng = np.random.default_rng(seed)
    # u H u* = Σ_{jk} z_j conj(z_k) q_j H q_k
    blocks = np.stack([[qj @ H @ qk for qk in q] for qj in q])
    total = np.zeros_like(H)
    total_sq = np.zeros(H.shape)
    done = 0
    while done < samples:
        m = min(batch, samples - done)
        z = np.exp(2j * np.pi * rng.random((m, len(q))))
        w = z[:, :, None] * z.conj()[:, None, :]
        conj = np.einsum("sjk,jkab->sab", w, blocks)
        vals = H[None] - conj  # -i δ(u)u* = H - u H u*
        total += vals.sum(axis=0)
        total_sq += (np.abs(vals) ** 2).sum(axis=0)
        done += m
    mean = total / samples
    var = np.maximum(total_sq / samples - np.abs(mean) ** 2, 0.0)
    return mean, np.sqrt(var / samples)


@dataclass(frozen=True)
class HomCorrection:
    q: list = field(repr=False)
    w: np.ndarray = field(repr=False)
    h: np.ndarray = field(repr=False)
    eps_used: float
    diagnostics: dict


def hom_correction(H, kernel, e, guard=1e-6, trials=64, seed=0):
    """Orthogonalize, implement by a unitary, and average out the derivation."""
    e = _projections(e)
    kernel = fc.BumpKernel() if kernel is None else kernel
    with staged("orthogonalize"):
        q = orthogonalize_abelian(H, kernel, e, guard=guard)
    eps = smoothing_deviation(H, kernel, e, trials, seed)
    with staged("implement"):
        w = implement_inner(e, q)
    h = average_out_derivation(H, q)
    dist = max(nk.opnorm(qi - ei) for qi, ei in zip(q, e))
    diag = {
        "eps": eps,
        "q_dist": dist,
        "q_bound": 3 * eps + eps ** 2 / 2,
        "orth_residual": orthogonality_residual(q),
        "conj_residual": max(nk.opnorm(w @ ei @ nk.dag(w) - qi) for ei, qi in zip(e, q)),
        "w_dev": nk.opnorm(w - nk.eye(H.shape[0])),
        "h_norm": nk.opnorm(h),
    }
    return HomCorrection(q, w, h, eps, diag)


def growth_lhs(H, kernel, e, t):
    """||δ(Σ_i a_i e^{i t a_i})|| with a_i = α_f(e_i)."""
    flow = fc.InnerFlow(H)
    total = 0
    for p in e:
        a = nk.hermitian(fc.smooth(flow, kernel, p))
        eig = nk.herm_eig(a)
        total = total + (eig.vectors * (eig.values * np.exp(1j * t * eig.values))) @ nk.dag(eig.vectors)
    return nk.opnorm(fc.derivation(flow, total))


# ---------------------------------------------------------------------------
# matrix units


def unit_conjugation(H2, d):
    """σ(H2) = Σ_{k,i} e^{(k)}_{i1} H2 e^{(k)}_{1i}, which lies in D'."""
    out = np.zeros_like(nk.as_matrix(H2))
    for blk in d.blocks:
        for i in range(blk.size):
            out += blk.unit(i, 0) @ H2 @ blk.unit(0, i)
    return nk.hermitian(out)


def matrix_unit_cocycle(H2, d, phases=None, tol=1e-8, anchors_only=False):
    """Cocycle v_t = Σ_{k,i} e^{ip_i t} e_{i1} α_t(e_{1i}) over the flow of H2.

    H2 must commute with the diagonal units of D. In canonical form
    v = (1, H3 - H2) with H3 = Σ p_i e_ii + σ(H2); with zero phases the new
    flow fixes D pointwise, otherwise it acts on D by the given phases.
    The identity only uses [H2, e_11] = 0 in each block, which is all that
    `anchors_only` checks.
    """
    H2 = nk.hermitian(H2)
    scale = max(nk.opnorm(H2), 1.0)
    if anchors_only:
        fixed = [blk.unit(0, 0) for blk in d.blocks]
    else:
        fixed = d.diagonal_units()
    worst = max(nk.opnorm(nk.comm(H2, p)) for p in fixed)
    if worst > tol * scale:
        raise PreconditionError("flow does not fix the diagonal units",
                                residual=worst)
    H3 = unit_conjugation(H2, d)
    if phases is not None:
        for (bi, i), p in phases.items():
            H3 = H3 + p * d.blocks[bi].unit(i, i)
    return cc.Cocycle(H2, nk.eye(H2.shape[0]), H3 - H2)


def pointwise_residual(H, d):
    """max over matrix units of ||[H, e_ij]||, which bounds ||α_t(x) - x|| / |t|."""
    return max(nk.opnorm(nk.comm(H, e)) for *_, e in d.units())


def fix_pointwise(H, d, kernel=None, config=DEFAULT_CONFIG):
    """Cocycle u with Ad u_t α_t = id on D."""
    H = nk.hermitian(H)
    kernel = fc.BumpKernel() if kernel is None else kernel
    flow = fc.InnerFlow(H)
    t0 = perf_counter()
    with staged("precheck"):
        before = fc.pointwise_defect(flow, d, config.grid, config.trials, config.seed)
        if before.upper >= config.delta_admissible:
            raise DefectTooLarge("pointwise defect above the admissible threshold",
                                 defect=before.upper, delta=config.delta_admissible)
    e = d.diagonal_units()
    with staged("abelian"):
        hc = hom_correction(H, kernel, e, config.band_guard, config.trials, config.seed)
    pinched = H - hc.h
    c1 = cc.Cocycle(H, nk.dag(hc.w), -hc.h)
    with staged("matrix_units"):
        c2 = matrix_unit_cocycle(c1.perturbed_hamiltonian, d)
    total = cc.compose(c2, c1)
    final = total.perturbed_hamiltonian
    resid = pointwise_residual(final, d)
    after = fc.pointwise_defect(fc.InnerFlow(final), d, config.grid, config.trials,
                                config.seed + 1)
    m = cc.metrics(total, config.grid)
    diag = {
        "stage": "fix_pointwise",
        "defect_before": before.to_dict(),
        "defect_after": after.to_dict(),
        "commutator_residual": resid,
        "abelian": hc.diagnostics,
        "pinching_commutes": max(nk.opnorm(nk.comm(pinched, q)) for q in hc.q),
        "metrics": m.to_dict(),
        "sup_dev_target": 3 * hc.eps_used + before.upper,
        "thresholds": {"delta_admissible": config.delta_admissible},
        "seconds": perf_counter() - t0,
    }
    return FixOutcome(total, diag)


# ---------------------------------------------------------------------------
# conjugating nearby subalgebras


def _match_blocks(target, near):
    zt = [blk.central_projection() for blk in target.blocks]
    order = []
    used = set()
    for blk in near.blocks:
        z = blk.central_projection()
        cands = [(nk.opnorm(z - zt[j]), j) for j, tb in enumerate(target.blocks)
                 if j not in used and (tb.size, tb.mult) == (blk.size, blk.mult)]
        if not cands:
            raise DimensionMismatch("block structures differ",
                                    target=str(target.spec), near=str(near.spec))
        _, j = min(cands)
        used.add(j)
        order.append(j)
    return order


def conjugate_subalgebra(target, near, guard=1e-6):
    """Unitary v with v·near·v* = target for two nearby subalgebras.

    The diagonal units f_i of `near` are pushed into `target` by the trace
    conditional expectation and orthogonalized with g1, giving projections
    q_i of `target`. Off-diagonal units e'_{1j} are the normalized
    compressions q_1 E(f_{1j}) q_j, and v is the polar part of
    v0 = Σ e'_{i1} q_1 f_{11} f_{1i}, which intertwines the two unit systems.
    """
    if target.ambient_dim != near.ambient_dim:
        raise DimensionMismatch("algebras live in different M_N")
    order = _match_blocks(target, near)
    ex = sa.CondExpectation(target)
    diag_units = near.diagonal_units()
    with staged("orthogonalize"):
        q = _orthogonalize([nk.hermitian(ex(f)) for f in diag_units], band_g1, guard, True)
    n = target.ambient_dim
    v0 = np.zeros((n, n), dtype=complex)
    pos = 0
    for bi, blk in enumerate(near.blocks):
        k = blk.size
        qs = q[pos:pos + k]
        pos += k
        z = target.blocks[order[bi]].central_projection()
        if max(nk.opnorm(qi - z @ qi) for qi in qs) > 1e-8:
            raise SpectralBandViolation("orthogonalized projection leaves its block",
                                        block=bi)
        e1 = [qs[0]]
        for j in range(1, k):
            x = qs[0] @ ex(blk.unit(0, j)) @ qs[j]
            nrm = nk.opnorm(x)
            if nrm < 0.5:
                raise SpectralBandViolation("off-diagonal compression too small",
                                            block=bi, norm=nrm)
            e1.append(x / nrm)
        f11 = blk.unit(0, 0)
        for i in range(k):
            v0 += nk.dag(e1[i]) @ qs[0] @ f11 @ blk.unit(0, i)
    return _gauge_fix(nk.polar(v0).unitary, target)


def _stabilizer_part(b, x):
    """Trace-orthogonal projection of x onto b + b'."""
    zs = sa.center_projections(b)
    centre = sum(z * (np.trace(z @ x) / np.trace(z)) for z in zs)
    return sa.cond_expect(b, x) + sa.cond_expect(sa.commutant(b), x) - centre


def _gauge_fix(v, target, steps=12, tol=1e-14):
    """Strip from log v its component along b + b'.

    exp(b + b') stabilizes the target, so v stays an exact conjugator; the
    fixed point is the conjugator whose generator is trace-orthogonal to
    b + b', which removes the first-order slack of the construction.
    """
    for _ in range(steps):
        gen = nk.hermitian(-1j * logm(v))
        y = nk.hermitian(_stabilizer_part(target, gen))
        if nk.opnorm(y) <= tol:
            break
        v = nk.expm_ith(y, -1.0) @ v
    return v


def conjugation_report(target, near, trials=64, seed=0):
    v = conjugate_subalgebra(target, near)
    d = sa.dist_estimate(target, near, trials, seed)
    moved = near.conjugate(v)
    exact = sa.dist_estimate(moved, target, trials, seed)
    dev = nk.opnorm(v - nk.eye(target.ambient_dim))
    return v, {
        "v_dev": dev,
        "defect_lower": d.lower,
        "defect_upper": d.upper,
        "bound_120": float(120 * np.sqrt(d.lower)),
        "within_120": bool(dev <= 120 * np.sqrt(d.lower)),
        "exact_defect": exact.upper,
    }


# ---------------------------------------------------------------------------
# invariant product states


def _adapted_basis(xi):
    """Unitary with first column xi."""
    k = xi.shape[0]
    m = np.concatenate([xi[:, None], np.eye(k, dtype=complex)], axis=1)
    q = np.linalg.qr(m)[0][:, :k]
    q[:, 0] *= np.vdot(q[:, 0], xi)
    return q


def product_split(omega, b):
    """Schmidt split of Ω across B ⊗ B' in B's tensor frame.

    Returns (xi, eta, defect, coefficients) with Ω ≈ U(xi ⊗ eta) up to the
    leading coefficient; defect = 1 - s_0^2.
    """
    u = sa.tensor_frame(b)
    k, m = b.blocks[0].size, b.blocks[0].mult
    mat = (nk.dag(u) @ omega).reshape(k, m)
    left, s, right = np.linalg.svd(mat)
    xi = left[:, 0] * s[0]
    eta = right[0].copy()
    xi = xi / np.linalg.norm(xi)
    # keep Ω = U(xi ⊗ eta) exactly on the leading term
    lead = np.outer(xi, eta).ravel()
    ph = np.vdot(lead, (nk.dag(u) @ omega))
    xi = xi * ph / abs(ph)
    return xi, eta, float(1 - s[0] ** 2), s


def _units_from_basis(u, phi, m):
    """Factor with units U(|φ_i><φ_j| ⊗ 1) for the basis φ of C^K."""
    k = phi.shape[0]
    n = u.shape[0]
    frames = np.einsum("nkm,kj->jnm", u.reshape(n, k, m), phi)
    return sa.MatrixSubalgebra(n, [sa.Block(frames)])


def compression_generator(H2, b, eta):
    """b_K with E H2 E = (b ⊗ |η><η|) in the tensor frame of B.

    E is the projection onto BΩ, which in the frame is 1 ⊗ |η><η|.
    """
    u = sa.tensor_frame(b)
    k, m = b.blocks[0].size, b.blocks[0].mult
    t = (nk.dag(u) @ H2 @ u).reshape(k, m, k, m)
    return np.einsum("iajb,a,b->ij", t, eta.conj(), eta)


def fix_invariant(H, b, kernel=None, omega=None, config=DEFAULT_CONFIG):
    """Cocycle whose flow leaves the factor B globally invariant and keeps Ω.

    Ω must be an eigenvector of H and a product vector for B ⊗ (A ∩ B').
    Stages: fix the projection E onto BΩ, then the minimal projection of B
    through Ω, then read off the compressed flow on B and emit the matrix
    unit cocycle with its phases.
    """
    H = nk.hermitian(H)
    kernel = fc.BumpKernel() if kernel is None else kernel
    if not b.is_factor:
        raise PreconditionError("fix_invariant needs a single-block subalgebra")
    n = H.shape[0]
    k, m = b.blocks[0].size, b.blocks[0].mult
    t0 = perf_counter()
    omega = np.asarray(omega, dtype=complex)
    omega = omega / np.linalg.norm(omega)
    lam = float(np.vdot(omega, H @ omega).real)
    scale = max(nk.opnorm(H), 1.0)
    eig_resid = np.linalg.norm(H @ omega - lam * omega)
    if eig_resid > 1e-8 * scale:
        raise NotInvariant("Ω is not an eigenvector of H", residual=float(eig_resid))
    diag = {"stage": "fix_invariant", "lambda": lam, "eig_residual": float(eig_resid),
            "spec": [k, m]}
    if k == 1 or m == 1:
        diag["trivial"] = True
        return FixOutcome(cc.Cocycle.trivial(H), diag)
    if config.check_defect:
        with staged("precheck"):
            before = fc.invariance_defect(fc.InnerFlow(H), b, config.grid,
                                          config.trials, config.seed)
            diag["defect_before"] = before.to_dict()
            if before.upper >= config.delta_admissible:
                raise DefectTooLarge("invariance defect above the admissible threshold",
                                     defect=before.upper, delta=config.delta_admissible)
    with staged("product_check"):
        xi, eta, pdef, _ = product_split(omega, b)
        diag["product_defect"] = pdef
        if pdef > config.product_tol:
            raise PreconditionError("Ω is not a product vector", defect=pdef)
    u = sa.tensor_frame(b)
    phi = _adapted_basis(xi)
    badapt = _units_from_basis(u, phi, m)
    proj = u @ np.kron(np.eye(k), np.outer(eta, eta.conj())) @ nk.dag(u)
    with staged("projection"):
        pf1 = fix_projection(H, proj, kernel, omega, config.riesz_check, config.drift_max)
    c1 = pf1.cocycle(H)
    H1 = c1.perturbed_hamiltonian
    e1 = badapt.blocks[0].unit(0, 0)
    with staged("minimal_projection"):
        pf2 = fix_projection(H1, e1, kernel, omega, config.riesz_check, config.drift_max)
    c2 = pf2.cocycle(H1)
    H2 = c2.perturbed_hamiltonian
    # compressed flow on B: E H2 E = b E
    bk = compression_generator(H2, b, eta)
    bphi = nk.dag(phi) @ bk @ phi
    offdiag = float(np.linalg.norm(bphi[0, 1:]))
    rest = nk.herm_eig(bphi[1:, 1:])
    basis = phi.copy()
    basis[:, 1:] = phi[:, 1:] @ rest.vectors
    mu = np.concatenate([[bphi[0, 0].real], rest.values])
    bfinal = _units_from_basis(u, basis, m)
    phases = {(0, j): float(mu[j] - mu[0]) for j in range(k)}
    with staged("matrix_units"):
        c3 = matrix_unit_cocycle(H2, bfinal, phases, anchors_only=True)
    total = cc.compose(c3, cc.compose(c2, c1))
    final = total.perturbed_hamiltonian
    split = final - sa.cond_expect(b, final) - sa.cond_expect(sa.commutant(b), final)
    split = split + np.trace(final) / n * nk.eye(n)
    om_resid = np.linalg.norm(final @ omega - lam * omega)
    diag.update({
        "projection": pf1.diagnostics,
        "minimal_projection": pf2.diagnostics,
        "beta_offdiag": offdiag,
        "phases": [phases[(0, j)] for j in range(k)],
        "split_residual": nk.opnorm(split),
        "state_residual": float(om_resid),
        "metrics": cc.metrics(total, config.grid).to_dict(),
        "seconds": perf_counter() - t0,
    })
    if nk.opnorm(split) > 1e-8 * scale or om_resid > 1e-8 * scale:
        raise InternalBoundViolation("final flow does not leave B invariant",
                                     split_residual=nk.opnorm(split),
                                     state_residual=float(om_resid))
    return FixOutcome(total, diag)


# ---------------------------------------------------------------------------
# towers


def invariance_split_residual(H, b):
    """For a factor B: ||H - E_B(H) - E_B'(H) + τ(H)||, zero iff Ad e^{itH} keeps B."""
    n = H.shape[0]
    r = H - sa.cond_expect(b, H) - sa.cond_expect(sa.commutant(b), H)
    return nk.opnorm(r + np.trace(H) / n * nk.eye(n))


def check_tower(tower, tol=1e-10):
    for lo, hi in zip(tower, tower[1:]):
        d = sa.one_sided_defect(lo, hi, trials=4)
        if d.upper > tol * max(lo.ambient_dim, 1):
            raise PreconditionError("tower is not nested", defect=d.upper)
    for level, alg in enumerate(tower, start=1):
        if not alg.is_factor:
            raise PreconditionError("fix_tower handles towers of factors only",
                                    level=level)


def fix_tower(H, tower, kernel=None, config=DEFAULT_CONFIG, _depth=0):
    """Cocycle whose flow leaves every level of a tower of factors invariant.

    Level 1 is fixed with the doubled-space driver. The fixed Hamiltonian
    splits as a + c with a in A_1 and c in A_1'; the remaining levels
    A_k ∩ A_1' are handled recursively in the coordinates of A_1' ≅ M_m, and
    that cocycle lives in A_1', so it commutes with A_1.
    """
    from .doubled import fix_prop_a

    H = nk.hermitian(H)
    kernel = fc.BumpKernel() if kernel is None else kernel
    tower = list(tower)
    if not tower:
        return FixOutcome(cc.Cocycle.trivial(H), {"levels": []})
    check_tower(tower)
    t0 = perf_counter()
    flow = fc.InnerFlow(H)
    a1 = tower[0]
    level_diag = {"level": _depth + 1, "spec": a1.spec, "center": "trivial (factor)"}
    if _depth == 0 and config.check_defect:
        for idx, alg in enumerate(tower, start=1):
            d = fc.invariance_defect(flow, alg, config.grid, config.trials, config.seed)
            if d.upper >= config.delta_admissible:
                raise DefectTooLarge("invariance defect above the admissible threshold",
                                     level=idx, defect=d.upper,
                                     delta=config.delta_admissible)
    with staged(f"level{_depth + 1}"):
        c1, pa = fix_prop_a(H, a1, kernel, config)
    level_diag["prop_a"] = pa
    H1 = c1.perturbed_hamiltonian
    comm = sa.commutant(a1)
    rest_tower = [sa.transport(sa.relative_commutant(alg, a1), comm) for alg in tower[1:]]
    c_part = sa.in_coords(comm, H1)
    sub, sub_diag = fix_tower(c_part, rest_tower, kernel, config, _depth + 1)
    lift = cc.Cocycle(H1, sa.from_coords(comm, sub.w), sa.from_coords(comm, sub.k))
    # H1 - c in coordinates of A_1 ⊗ A_1'; the lift sees only the A_1' part
    total = cc.compose(lift, c1)
    lm = cc.metrics(c1, config.grid)
    level_diag["metrics"] = lm.to_dict()
    level_diag["lift_commutes"] = max(
        [nk.opnorm(nk.comm(lift.w, e)) for *_, e in a1.units()]
        + [nk.opnorm(nk.comm(lift.k, e)) for *_, e in a1.units()])
    level_diag["seconds"] = perf_counter() - t0
    if config.budget is not None:
        level_diag["budget"] = config.budget / 2 ** (_depth + 1)
        if config.strict_budget and lm.sup_dev > level_diag["budget"]:
            raise BudgetExhausted("level cocycle exceeds its budget",
                                  level=_depth + 1, sup_dev=lm.sup_dev,
                                  budget=level_diag["budget"])
    levels = [level_diag] + sub_diag["levels"]
    return FixOutcome(total, {"levels": levels})
