"""Unital *-subalgebras of M_N presented by matrix units.

A block of size K and multiplicity m is stored through its frames
V_1, ..., V_K, each an N x m isometry, with ``e_ij = V_i V_j^*``. The frames
are tied to the units (``V_i = e_i1 V_1``), so the concatenation of all
frames is a unitary that carries the canonical algebra
``(+)_b M_{K_b} (x) 1_{m_b}`` onto the subalgebra. Storing frames instead of
the K^2 units keeps the memory footprint at N^2 per block.
"""

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import numkernel as nk
from .errors import DimensionMismatch, PreconditionError


@dataclass(frozen=True)
class Block:
    frames: np.ndarray  # (K, N, m)

    @property
    def size(self):
        return self.frames.shape[0]

    @property
    def mult(self):
        return self.frames.shape[2]

    def unit(self, i, j):
        return self.frames[i] @ nk.dag(self.frames[j])

    def support(self):
        """The N x (K m) isometry [V_1 ... V_K]."""
        return np.concatenate(list(self.frames), axis=1)

    def central_projection(self):
        f = self.support()
        return f @ nk.dag(f)


@dataclass(frozen=True)
class SubalgDistance:
    """Certified interval. For sups over a time grid, `where` is the
    maximizing t and `pad` the Lipschitz allowance for the gaps between
    grid points (reported, not added to `upper`)."""

    lower: float
    upper: float
    witness: tuple = None
    where: float = None
    pad: float = 0.0

    def to_dict(self):
        out = {"lower": self.lower, "upper": self.upper}
        if self.where is not None:
            out["t_max"] = self.where
            out["lipschitz_pad"] = self.pad
        return out


class MatrixSubalgebra:
    def __init__(self, ambient_dim, blocks):
        self.ambient_dim = int(ambient_dim)
        self.blocks = tuple(blocks)
        for blk in self.blocks:
            if blk.frames.shape[1] != self.ambient_dim:
                raise DimensionMismatch("frame height differs from N")
        if sum(b.size * b.mult for b in self.blocks) != self.ambient_dim:
            raise DimensionMismatch("sum of K_b m_b differs from N")

    def __repr__(self):
        spec = [(b.size, b.mult) for b in self.blocks]
        return f"MatrixSubalgebra(N={self.ambient_dim}, blocks={spec})"

    @property
    def spec(self):
        return [(b.size, b.mult) for b in self.blocks]

    @property
    def dim(self):
        return sum(b.size ** 2 for b in self.blocks)

    @property
    def is_abelian(self):
        return all(b.size == 1 for b in self.blocks)

    @property
    def is_factor(self):
        return len(self.blocks) == 1

    @property
    def is_full(self):
        return self.dim == self.ambient_dim ** 2

    def frame(self):
        """Unitary whose columns are the frames, ordered (block, i, alpha)."""
        return np.concatenate([b.support() for b in self.blocks], axis=1)

    def units(self):
        for bi, blk in enumerate(self.blocks):
            for i in range(blk.size):
                for j in range(blk.size):
                    yield bi, i, j, blk.unit(i, j)

    def diagonal_units(self):
        return [blk.unit(i, i) for blk in self.blocks for i in range(blk.size)]

    def coeffs(self, x):
        """Block coefficients X_b with x = sum X_b[i,j] e_ij (trace projection)."""
        out = []
        for blk in self.blocks:
            k, m = blk.size, blk.mult
            f = blk.support()
            t = (nk.dag(f) @ x @ f).reshape(k, m, k, m)
            out.append(np.einsum("iaja->ij", t) / m)
        return out

    def embed(self, coeffs):
        n = self.ambient_dim
        out = np.zeros((n, n), dtype=complex)
        for blk, c in zip(self.blocks, coeffs):
            f = blk.support()
            out += f @ np.kron(c, np.eye(blk.mult)) @ nk.dag(f)
        return out

    def conjugate(self, u):
        """The subalgebra u B u*."""
        return MatrixSubalgebra(self.ambient_dim,
                                [Block(np.einsum("ab,kbm->kam", u, b.frames))
                                 for b in self.blocks])

    def with_frames(self, block_index, frames):
        blocks = list(self.blocks)
        blocks[block_index] = Block(frames)
        return MatrixSubalgebra(self.ambient_dim, blocks)

    def invariant_residual(self):
        """Largest violation of the matrix-unit relations and unitality."""
        n = self.ambient_dim
        worst = 0.0
        total = np.zeros((n, n), dtype=complex)
        for blk in self.blocks:
            for i in range(blk.size):
                gram = nk.dag(blk.frames[i]) @ blk.frames[i]
                worst = max(worst, nk.opnorm(gram - np.eye(blk.mult)))
        frame = self.frame()
        worst = max(worst, nk.opnorm(nk.dag(frame) @ frame - np.eye(n)))
        for blk in self.blocks:
            total += blk.central_projection()
        return max(worst, nk.opnorm(total - np.eye(n)))

    def to_json(self):
        return {"blocks": [{"k": b.size, "m": b.mult} for b in self.blocks],
                "basis": nk.matrix_to_json(self.frame())}

    @classmethod
    def from_json(cls, obj):
        spec = [(int(b["k"]), int(b["m"])) for b in obj["blocks"]]
        basis = nk.matrix_from_json(obj["basis"])
        return from_block_partition(basis.shape[0], spec, basis)


def from_block_partition(ambient_dim, spec, basis=None):
    """Subalgebra basis ((+)_b M_{K_b} (x) 1_{m_b}) basis*."""
    n = int(ambient_dim)
    if sum(k * m for k, m in spec) != n:
        raise DimensionMismatch("sum of K_b m_b must equal N",
                                spec=str(spec), n=n)
    basis = nk.eye(n) if basis is None else nk.as_matrix(basis)
    if basis.shape != (n, n):
        raise DimensionMismatch("basis has the wrong shape")
    blocks = []
    off = 0
    for k, m in spec:
        cols = basis[:, off:off + k * m]
        blocks.append(Block(cols.reshape(n, k, m).transpose(1, 0, 2).copy()))
        off += k * m
    return MatrixSubalgebra(n, blocks)


def full_algebra(n):
    return from_block_partition(n, [(n, 1)])


def scalars(n):
    return from_block_partition(n, [(1, n)])


@dataclass(frozen=True)
class CondExpectation:
    """Trace-preserving conditional expectation onto `target`."""

    target: MatrixSubalgebra

    def __call__(self, x):
        return self.target.embed(self.target.coeffs(x))

    def orthonormal_basis(self):
        """Units scaled to unit norm in <x,y> = tau(y* x)."""
        n = self.target.ambient_dim
        return [e * np.sqrt(n / self.target.blocks[b].mult)
                for b, _, _, e in self.target.units()]


def cond_expect(target, x):
    if isinstance(target, CondExpectation):
        return target(x)
    return CondExpectation(target)(x)


def commutant(b):
    """A ∩ B' with its canonical matrix units."""
    return MatrixSubalgebra(b.ambient_dim,
                            [Block(np.transpose(blk.frames, (2, 1, 0)).copy())
                             for blk in b.blocks])


def center_projections(b):
    return [blk.central_projection() for blk in b.blocks]


def corner(b, z, tol=nk.TOL.construct):
    """Compress B to the corner of a minimal central projection z.

    Returns the compressed algebra on C^{rank z} and the isometry J with
    ``J J* = z``; an element y of the corner corresponds to ``J* y J``.
    """
    for blk in b.blocks:
        if nk.opnorm(blk.central_projection() - z) <= tol * b.ambient_dim:
            j = blk.support()
            r = j.shape[1]
            return from_block_partition(r, [(blk.size, blk.mult)]), j
    raise PreconditionError("z is not a minimal central projection of B")


def tensor_frame(b):
    """For a factor B, the unitary U with B = U (M_K (x) 1_m) U*."""
    if not b.is_factor:
        raise PreconditionError("tensor frame needs a single-block algebra")
    return b.blocks[0].support()


def haar_unitary_in(b, rng):
    """Haar unitary of B, sampled per block. `rng` may be a seed."""
    rng = np.random.default_rng(rng)
    return b.embed([nk.haar_unitary(rng, blk.size) for blk in b.blocks])


def _orth_span(vecs, tol):
    mat = np.stack([v.ravel() for v in vecs], axis=1)
    u, s, _ = np.linalg.svd(mat, full_matrices=False)
    rank = int((s > tol * max(s[0], 1.0)).sum()) if s.size else 0
    return u[:, :rank]


def _clusters(vals, tol):
    groups = [[0]]
    for i in range(1, len(vals)):
        if vals[i] - vals[i - 1] > tol:
            groups.append([i])
        else:
            groups[-1].append(i)
    return groups


def from_span(mats, seed=0, close=True, tol=1e-9):
    """Matrix-unit presentation of the *-algebra spanned by `mats`.

    The span is closed under products and adjoints when `close` is set.
    Central projections come from a random Hermitian central element,
    minimal projections from a random Hermitian element of each corner, and
    off-diagonal units from compressions of a random element.
    """
    mats = [nk.as_matrix(m) for m in mats]
    n = mats[0].shape[0]
    rng = np.random.default_rng(seed)
    seedlist = mats + [nk.eye(n)] + [nk.dag(m) for m in mats]
    basis = _orth_span(seedlist, tol)
    while close:
        elems = [basis[:, i].reshape(n, n) for i in range(basis.shape[1])]
        prods = [a @ c for a in elems for c in elems]
        grown = _orth_span(elems + prods, tol)
        if grown.shape[1] == basis.shape[1]:
            break
        basis = grown
    elems = [basis[:, i].reshape(n, n) for i in range(basis.shape[1])]
    d = len(elems)

    def rand_elem():
        c = rng.standard_normal(d) + 1j * rng.standard_normal(d)
        return sum(ci * e for ci, e in zip(c, elems))

    # centre: combinations commuting with every basis element
    rows = np.concatenate(
        [np.stack([nk.comm(a, c).ravel() for a in elems], axis=1) for c in elems],
        axis=0)
    _, s, vh = np.linalg.svd(rows, full_matrices=False)
    null = vh[int((s > tol * max(s[0], 1.0)).sum()):].conj()
    zc = sum((rng.standard_normal() + 1j * rng.standard_normal())
             * sum(coef * e for coef, e in zip(vec, elems)) for vec in null)
    zdec = nk.herm_eig(zc)
    spread = max(np.ptp(zdec.values), 1.0)
    blocks = []
    for group in _clusters(zdec.values, 1e-6 * spread):
        g = zdec.vectors[:, group]
        for _ in range(8):
            y = nk.hermitian(rand_elem())
            ydec = nk.herm_eig(nk.dag(g) @ y @ g)
            groups = _clusters(ydec.values, 1e-6 * max(np.ptp(ydec.values), 1.0))
            if len({len(gr) for gr in groups}) == 1:
                break
        else:
            raise PreconditionError("could not split a central summand")
        frames1 = g @ ydec.vectors[:, groups[0]]
        fr = [frames1]
        for gr in groups[1:]:
            vj = g @ ydec.vectors[:, gr]
            for _ in range(8):
                x = rand_elem()
                y1j = frames1 @ nk.dag(frames1) @ x @ vj @ nk.dag(vj)
                nrm = nk.opnorm(y1j)
                if nrm > 1e-6 * max(nk.opnorm(x), 1.0):
                    break
            else:
                raise PreconditionError("could not build off-diagonal units")
            fr.append(nk.dag(y1j / nrm) @ frames1)
        blocks.append(Block(np.stack(fr)))
    alg = MatrixSubalgebra(n, blocks)
    if alg.invariant_residual() > 1e-8:
        raise PreconditionError("span is not a *-algebra",
                                residual=alg.invariant_residual())
    return alg


def relative_commutant(big, small):
    """big ∩ small', computed as the image of big under E_{small'}."""
    ex = CondExpectation(commutant(small))
    return from_span([ex(e) for _, _, _, e in big.units()])


def transport(alg, factor):
    """Express a subalgebra of the factor F in the coordinates M_m of F."""
    if not factor.is_factor:
        raise PreconditionError("transport needs a single-block factor")
    mats = [factor.coeffs(e)[0] for _, _, _, e in alg.units()]
    return from_span(mats, close=False)


def in_coords(factor, x):
    return factor.coeffs(x)[0]


def from_coords(factor, c):
    return factor.embed([c])


def _residual_columns(b, c):
    units = np.stack([e for *_, e in b.units()])
    res = units - _cond_expect_batch(c, units)
    return res.reshape(len(units), -1).T


def _haar_batch(rng, count, k):
    g = (rng.standard_normal((count, k, k)) + 1j * rng.standard_normal((count, k, k))) / np.sqrt(2)
    q, r = np.linalg.qr(g)
    d = np.diagonal(r, axis1=1, axis2=2)
    return q * (d / np.abs(d))[:, None, :]


def _embed_batch(b, coeffs):
    """Stacked version of `embed`: coeffs[i] has shape (S, K_i, K_i)."""
    out = 0
    for blk, c in zip(b.blocks, coeffs):
        f = blk.support()
        k, m = blk.size, blk.mult
        big = np.einsum("sij,ab->siajb", c, np.eye(m)).reshape(-1, k * m, k * m)
        out = out + f @ big @ nk.dag(f)
    return out


def _cond_expect_batch(c, xs):
    coeffs = []
    for blk in c.blocks:
        f = blk.support()
        k, m = blk.size, blk.mult
        t = (nk.dag(f) @ xs @ f).reshape(-1, k, m, k, m)
        coeffs.append(np.einsum("siaja->sij", t) / m)
    return _embed_batch(c, coeffs)


def _extreme_samples(b, rng, trials):
    """Stack of unit-ball extreme points: matrix units, diagonal sign
    unitaries (all patterns up to 10 diagonal units, random beyond) and
    Haar unitaries of B."""
    units = [e for *_, e in b.units()]
    diag = b.diagonal_units()
    if len(diag) <= 10:
        signs = np.array(list(product((1.0, -1.0), repeat=len(diag))))
    else:
        signs = rng.choice((1.0, -1.0), size=(trials, len(diag)))
    sign_mats = np.einsum("sd,dab->sab", signs, np.stack(diag))
    haar = _embed_batch(b, [_haar_batch(rng, trials, blk.size) for blk in b.blocks])
    return np.concatenate([np.stack(units), sign_mats, haar])


def _batch_opnorm(xs):
    return np.linalg.svd(xs, compute_uv=False)[:, 0]


def one_sided_defect(b, c, trials=64, seed=0):
    """Certified interval for sup_{x in B, ||x|| <= 1} ||x - E_C(x)||.

    The lower end is a maximum over extreme points of B's unit ball
    (matrix units, sign unitaries of the diagonal, Haar unitaries). The upper
    end bounds ||(id - E_C) x||_op by the Hilbert-Schmidt norm; on B the
    norm making the matrix units orthonormal satisfies
    ||x||_w <= sqrt(sum_b K_b) ||x||_op, and sum_b K_b <= dim B.
    """
    if b.ambient_dim != c.ambient_dim:
        raise DimensionMismatch("algebras live in different M_N")
    ex = CondExpectation(c)
    cols = _residual_columns(b, c)
    gram = nk.dag(cols) @ cols
    top = float(np.sqrt(max(nk.herm_eig(gram).values[-1], 0.0)))
    upper = top * np.sqrt(sum(blk.size for blk in b.blocks))
    rng = np.random.default_rng(seed)
    xs = _extreme_samples(b, rng, trials)
    vals = _batch_opnorm(xs - _cond_expect_batch(c, xs))
    i = int(np.argmax(vals))
    lower = float(vals[i])
    witness = (xs[i], ex(xs[i])) if lower > 0 else None
    return SubalgDistance(lower, float(max(upper, lower)), witness)


def dist_estimate(b, c, trials=64, seed=0):
    """Symmetrized defect: max of the two one-sided intervals."""
    if b.is_full and c.is_full:
        return SubalgDistance(0.0, 0.0)
    ab = one_sided_defect(b, c, trials, seed)
    ba = one_sided_defect(c, b, trials, seed)
    wit = ab.witness if ab.lower >= ba.lower else ba.witness
    return SubalgDistance(float(max(ab.lower, ba.lower)),
                          float(max(ab.upper, ba.upper)), wit)
