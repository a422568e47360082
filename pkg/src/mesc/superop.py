"""Super-operator machinery for channels between finite tensor-product systems.

A channel is stored canonically through the Choi-type matrix of its adjoint,
built as the basis sum ``J(Psi) = sum_k Psi(B_k) (x) B_k`` over an orthonormal
Hermitian operator basis ``B_k`` of the map's input space, scaled so that
``Tr B_j B_k = delta_jk``.  The first tensor factor of ``J`` carries the map's
outputs, the second indexes the input basis.  This sum is invariant under real
orthogonal changes between Hermitian bases, reconstructs the map exactly, and
its partial trace over the index factor equals the image of the identity.

One subtlety is load-bearing: complete positivity is *not* equivalent to
positivity of this literal sum (the identity map already yields the swap
operator, which has a negative eigenvalue).  The object whose spectrum decides
complete positivity is the partial transpose of ``J`` on the index factor,
equivalently the basis sum with a conjugate on the second slot.  All
positivity and defect computations in this package therefore go through
:meth:`ChoiMatrix.cp_test_matrix`, while storage, slicing and reconstruction
use the literal sum.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from . import operator_core as oc

CPTP_TOL = 1e-9


def _vec(m: np.ndarray) -> np.ndarray:
    return np.asarray(m, dtype=complex).reshape(-1)


def _choi_to_transfer(j: np.ndarray, dout: int, din: int) -> np.ndarray:
    """Transfer matrix T with vec(Psi(p)) = T @ vec(p), from the Choi matrix."""
    j4 = np.asarray(j, dtype=complex).reshape(dout, din, dout, din)
    # Psi(p)_{xy} = sum_{ab} J[(x,a),(y,b)] p_{ba}
    return j4.transpose(0, 2, 3, 1).reshape(dout * dout, din * din)


def _transfer_to_choi(t: np.ndarray, dout: int, din: int) -> np.ndarray:
    t4 = np.asarray(t, dtype=complex).reshape(dout, dout, din, din)
    return t4.transpose(0, 3, 1, 2).reshape(dout * din, dout * din)


class ChoiMatrix:
    """Choi-type matrix of a linear map, on (map output) x (input index)."""

    def __init__(self, matrix: np.ndarray, out_dims: Sequence[int],
                 in_dims: Sequence[int], validate: bool = True):
        self.out_dims = tuple(int(d) for d in out_dims)
        self.in_dims = tuple(int(d) for d in in_dims)
        self.dout = int(np.prod(self.out_dims)) if self.out_dims else 1
        self.din = int(np.prod(self.in_dims)) if self.in_dims else 1
        matrix = np.asarray(matrix, dtype=complex)
        n = self.dout * self.din
        if matrix.shape != (n, n):
            raise ValueError("Choi matrix has shape %r, expected (%d, %d)"
                             % (matrix.shape, n, n))
        if validate:
            scale = max(1.0, float(np.max(np.abs(matrix))))
            if np.max(np.abs(matrix - matrix.conj().T)) > 1e-10 * scale:
                raise ValueError("Choi matrix is not Hermitian; the map does "
                                 "not preserve Hermiticity")
        self.matrix = matrix

    def cp_test_matrix(self) -> np.ndarray:
        """Partial transpose on the index factor; PSD iff the map is CP."""
        j4 = self.matrix.reshape(self.dout, self.din, self.dout, self.din)
        return j4.transpose(0, 3, 2, 1).reshape(self.matrix.shape)

    def min_cp_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.cp_test_matrix())[0])

    def index_marginal(self) -> np.ndarray:
        """Trace over the index factor: equals the map applied to identity."""
        j4 = self.matrix.reshape(self.dout, self.din, self.dout, self.din)
        return np.trace(j4, axis1=1, axis2=3)

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Evaluate the represented map on a matrix of the input dimension."""
        p = np.asarray(p, dtype=complex)
        if p.shape != (self.din, self.din):
            raise ValueError("operand has shape %r, expected (%d, %d)"
                             % (p.shape, self.din, self.din))
        j4 = self.matrix.reshape(self.dout, self.din, self.dout, self.din)
        return np.einsum("xayb,ba->xy", j4, p)


class ChannelMap:
    """A linear map between operator spaces, stored via its adjoint's Choi.

    ``in_dims``/``out_dims`` are the factor dimensions of the map's input and
    output systems.  Nothing here enforces the map to be a quantum channel;
    :func:`is_cptp` reports on that.
    """

    def __init__(self, in_dims: Sequence[int], out_dims: Sequence[int],
                 choi_adjoint: ChoiMatrix):
        self.in_dims = tuple(int(d) for d in in_dims)
        self.out_dims = tuple(int(d) for d in out_dims)
        self.din = int(np.prod(self.in_dims)) if self.in_dims else 1
        self.dout = int(np.prod(self.out_dims)) if self.out_dims else 1
        if choi_adjoint.dout != self.din or choi_adjoint.din != self.dout:
            raise ValueError("adjoint Choi dimensions (%d out, %d in) do not "
                             "match channel (%d in, %d out)"
                             % (choi_adjoint.dout, choi_adjoint.din,
                                self.din, self.dout))
        self.choi_adjoint = choi_adjoint
        self._transfer_adjoint: Optional[np.ndarray] = None

    # -- construction -------------------------------------------------------

    @classmethod
    def from_apply(cls, fn: Callable[[np.ndarray], np.ndarray],
                   in_dims: Sequence[int], out_dims: Sequence[int]) -> "ChannelMap":
        """Build a channel from its forward action on dense matrices."""
        j_fwd = choi_matrix_of_callable(fn, in_dims, out_dims)
        t_fwd = _choi_to_transfer(j_fwd.matrix, j_fwd.dout, j_fwd.din)
        j_adj = _transfer_to_choi(t_fwd.conj().T,
                                  j_fwd.din, j_fwd.dout)
        return cls(in_dims, out_dims,
                   ChoiMatrix(j_adj, in_dims, out_dims))

    # -- actions ------------------------------------------------------------

    def _adj_transfer(self) -> np.ndarray:
        if self._transfer_adjoint is None:
            self._transfer_adjoint = _choi_to_transfer(
                self.choi_adjoint.matrix, self.din, self.dout)
        return self._transfer_adjoint

    def apply(self, rho: np.ndarray) -> np.ndarray:
        """Forward action on a matrix over the input systems."""
        rho = np.asarray(rho, dtype=complex)
        if rho.shape != (self.din, self.din):
            raise ValueError("operand has shape %r, expected (%d, %d)"
                             % (rho.shape, self.din, self.din))
        t = self._adj_transfer().conj().T
        return (t @ _vec(rho)).reshape(self.dout, self.dout)

    def apply_adjoint(self, q: np.ndarray) -> np.ndarray:
        """Adjoint action on a matrix over the output systems."""
        q = np.asarray(q, dtype=complex)
        if q.shape != (self.dout, self.dout):
            raise ValueError("operand has shape %r, expected (%d, %d)"
                             % (q.shape, self.dout, self.dout))
        return (self._adj_transfer() @ _vec(q)).reshape(self.din, self.din)

    def adjoint(self) -> "ChannelMap":
        """The adjoint map, with input and output systems swapped."""
        t_fwd = self._adj_transfer().conj().T
        j_fwd = _transfer_to_choi(t_fwd, self.dout, self.din)
        return ChannelMap(self.out_dims, self.in_dims,
                          ChoiMatrix(j_fwd, self.out_dims, self.in_dims))


def choi_matrix_of_callable(fn: Callable[[np.ndarray], np.ndarray],
                            in_dims: Sequence[int],
                            out_dims: Sequence[int]) -> ChoiMatrix:
    """Entrywise Choi construction: sum of fn(B_k) (x) B_k over a basis."""
    din = int(np.prod(tuple(in_dims))) if tuple(in_dims) else 1
    dout = int(np.prod(tuple(out_dims))) if tuple(out_dims) else 1
    basis = oc.make_standard_basis(din)
    tilde = basis.elements / np.sqrt(din)
    j = np.zeros((dout * din, dout * din), dtype=complex)
    for k in range(din * din):
        out = np.asarray(fn(tilde[k]), dtype=complex)
        if out.shape != (dout, dout):
            raise ValueError("map output has shape %r, expected (%d, %d)"
                             % (out.shape, dout, dout))
        j += np.kron(out, tilde[k])
    return ChoiMatrix(j, out_dims, in_dims)


def adjoint_map(phi: ChannelMap) -> ChannelMap:
    """Adjoint with respect to the (unnormalized) trace inner product."""
    return phi.adjoint()


def choi_of(phi, in_dims: Optional[Sequence[int]] = None,
            out_dims: Optional[Sequence[int]] = None) -> ChoiMatrix:
    """Choi-type matrix of the forward map of `phi`.

    `phi` is either a ChannelMap, or a callable together with explicit
    `in_dims` / `out_dims`.
    """
    if isinstance(phi, ChannelMap):
        t_fwd = phi._adj_transfer().conj().T
        j_fwd = _transfer_to_choi(t_fwd, phi.dout, phi.din)
        return ChoiMatrix(j_fwd, phi.out_dims, phi.in_dims)
    if in_dims is None or out_dims is None:
        raise ValueError("callable maps need explicit in_dims and out_dims")
    return choi_matrix_of_callable(phi, in_dims, out_dims)


def map_from_choi(j: ChoiMatrix) -> ChannelMap:
    """Channel whose forward action is the map represented by `j`."""
    t_fwd = _choi_to_transfer(j.matrix, j.dout, j.din)
    j_adj = _transfer_to_choi(t_fwd.conj().T, j.din, j.dout)
    return ChannelMap(j.in_dims, j.out_dims,
                      ChoiMatrix(j_adj, j.in_dims, j.out_dims))


def is_cptp(phi: ChannelMap, tol: float = CPTP_TOL) -> dict:
    """Structured CPTP report for a channel.

    `min_choi_eig` is the smallest eigenvalue of the CP test matrix (the
    index-side partial transpose of the stored adjoint Choi), which is
    nonnegative exactly for completely positive maps.  `marginal_residual`
    is the spectral distance of the index marginal from the identity, which
    vanishes exactly for trace-preserving maps.  `verdict` combines both at
    tolerance `tol`.
    """
    j = phi.choi_adjoint
    min_eig = j.min_cp_eigenvalue()
    marg = j.index_marginal()
    residual = float(np.linalg.norm(marg - np.eye(j.dout), ord=2))
    verdict = bool(min_eig >= -tol and residual <= tol)
    return {"min_choi_eig": min_eig,
            "marginal_residual": residual,
            "verdict": verdict}


# ---------------------------------------------------------------------------
# slicing
# ---------------------------------------------------------------------------

class SlicedOperator:
    """Block coefficients of an operator along trailing tensor factors.

    For M on (leading (x) A), the slices are M_a = Tr_A[(id (x) A_a) M] over
    the scaled basis elements A_a; M reconstructs as sum_a M_a (x) A_a.  When
    a second basis is supplied the leading block is split once more into
    (core (x) P) and each M_a is refined into M_{p,a}.
    """

    def __init__(self, matrix: np.ndarray, a_basis: oc.HermitianBasis,
                 p_basis: Optional[oc.HermitianBasis] = None):
        matrix = np.asarray(matrix, dtype=complex)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("expected a square matrix")
        da = a_basis.dim
        if matrix.shape[0] % da != 0:
            raise ValueError("matrix dimension %d is not divisible by the "
                             "trailing factor dimension %d"
                             % (matrix.shape[0], da))
        self.matrix = matrix
        self.a_basis = a_basis
        self.p_basis = p_basis
        self.dsp = matrix.shape[0] // da
        self.da = da
        tilde_a = a_basis.elements / np.sqrt(da)
        m4 = matrix.reshape(self.dsp, da, self.dsp, da)
        # (M_a)_{ij} = sum_{alpha,gamma} (A_a)_{alpha,gamma} M_{(i,gamma),(j,alpha)}
        self.ma = np.einsum("kag,igja->kij", tilde_a, m4)
        if p_basis is not None:
            dp = p_basis.dim
            if self.dsp % dp != 0:
                raise ValueError("leading block %d not divisible by %d"
                                 % (self.dsp, dp))
            self.ds = self.dsp // dp
            self.dp = dp
            tilde_p = p_basis.elements / np.sqrt(dp)
            ma4 = self.ma.reshape(self.da * self.da,
                                  self.ds, dp, self.ds, dp)
            self.mpa = np.einsum("kag,nigja->nkij", tilde_p, ma4).reshape(
                self.da * self.da, dp * dp, self.ds, self.ds)
        else:
            self.ds = self.dsp
            self.dp = 1
            self.mpa = None

    def reconstruct(self) -> np.ndarray:
        """sum_a M_a (x) A_a with the scaled basis elements."""
        tilde_a = self.a_basis.elements / np.sqrt(self.da)
        return np.einsum("kij,kab->iajb", self.ma, tilde_a).reshape(
            self.matrix.shape)

    def reconstruct_slice(self, a: int) -> np.ndarray:
        """sum_p M_{p,a} (x) P_p, which must return M_a."""
        if self.mpa is None:
            raise ValueError("no second-level slicing was computed")
        tilde_p = self.p_basis.elements / np.sqrt(self.dp)
        return np.einsum("kij,kab->iajb", self.mpa[a], tilde_p).reshape(
            self.dsp, self.dsp)

    def slice_two_norms(self) -> np.ndarray:
        """Normalized 2-norms of the first-level slices."""
        sq = np.einsum("kij,kij->k", self.ma, self.ma.conj()).real
        return np.sqrt(np.maximum(sq, 0.0) / self.dsp)


def slice_operator(m: np.ndarray, a_basis: oc.HermitianBasis,
                   p_basis: Optional[oc.HermitianBasis] = None) -> SlicedOperator:
    """Slice an operator along its trailing factor (and optionally the next)."""
    return SlicedOperator(m, a_basis, p_basis)


# ---------------------------------------------------------------------------
# channel application and embedding
# ---------------------------------------------------------------------------

def apply_channel(phi: ChannelMap, rho: np.ndarray) -> np.ndarray:
    """Apply the forward map to a state; preserves the trace for channels."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (phi.din, phi.din):
        raise ValueError("state has shape %r but the channel input dimension "
                         "is %d" % (rho.shape, phi.din))
    return phi.apply(rho)


def apply_embedded(phi: ChannelMap, rho: np.ndarray, dims: Sequence[int],
                   start: int) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Apply a channel to a contiguous factor block of a larger operator.

    `dims` are the tensor factor dimensions of `rho`; the block
    `dims[start : start + len(phi.in_dims)]` must match the channel input.
    Returns the new matrix and its factor dimensions.
    """
    dims = tuple(int(d) for d in dims)
    k = len(phi.in_dims)
    block = dims[start:start + k]
    if block != phi.in_dims:
        raise ValueError("factor block %r does not match channel input %r"
                         % (block, phi.in_dims))
    dl = int(np.prod(dims[:start])) if start else 1
    dg = phi.din
    dr = int(np.prod(dims[start + k:])) if dims[start + k:] else 1
    rho6 = np.asarray(rho, dtype=complex).reshape(dl, dg, dr, dl, dg, dr)
    t4 = phi._adj_transfer().conj().T.reshape(phi.dout, phi.dout, dg, dg)
    out6 = np.einsum("xygh,lgrmhs->lxrmys", t4, rho6)
    new_dims = dims[:start] + phi.out_dims + dims[start + k:]
    n = int(np.prod(new_dims))
    return out6.reshape(n, n), new_dims


# ---------------------------------------------------------------------------
# stock channels
# ---------------------------------------------------------------------------

def identity_channel(dims: Sequence[int]) -> ChannelMap:
    return ChannelMap.from_apply(lambda x: x, dims, dims)


def unitary_channel(u: np.ndarray, dims: Optional[Sequence[int]] = None) -> ChannelMap:
    u = np.asarray(u, dtype=complex)
    d = u.shape[0]
    if u.shape != (d, d) or np.max(np.abs(u.conj().T @ u - np.eye(d))) > 1e-10:
        raise ValueError("not a unitary matrix")
    if dims is None:
        dims = (d,)
    return ChannelMap.from_apply(lambda x: u @ x @ u.conj().T, dims, dims)


def transpose_channel(dim: int) -> ChannelMap:
    """The transpose map; positive but famously not completely positive."""
    return ChannelMap.from_apply(lambda x: x.T, (dim,), (dim,))


def completely_depolarizing_channel(in_dims: Sequence[int],
                                    out_dims: Optional[Sequence[int]] = None) -> ChannelMap:
    if out_dims is None:
        out_dims = in_dims
    dout = int(np.prod(tuple(out_dims)))
    return ChannelMap.from_apply(
        lambda x: np.trace(x) * np.eye(dout) / dout, in_dims, out_dims)


def depolarizing_channel(dims: Sequence[int], gamma: float) -> ChannelMap:
    """Coefficient-damping channel: scales weight-k basis terms by gamma^k."""
    dims = tuple(int(d) for d in dims)
    return ChannelMap.from_apply(
        lambda x: oc.depolarize(x, dims, gamma), dims, dims)


def random_cptp(in_dims: Sequence[int], out_dims: Sequence[int],
                rng: np.random.Generator, rank: Optional[int] = None) -> ChannelMap:
    """Random CPTP map: normalized Wishart Choi, uniform-ish over channels."""
    din = int(np.prod(tuple(in_dims)))
    dout = int(np.prod(tuple(out_dims)))
    n = din * dout
    r = n if rank is None else int(rank)
    g = rng.standard_normal((n, r)) + 1j * rng.standard_normal((n, r))
    w = g @ g.conj().T
    # columns ordered (input, output); normalize the input marginal
    w4 = w.reshape(din, dout, din, dout)
    sigma = np.trace(w4, axis1=1, axis2=3)
    vals, vecs = np.linalg.eigh(sigma)
    if np.min(vals) <= 1e-12 * np.max(vals):
        raise ValueError("degenerate random Choi; use a larger rank")
    s_inv_half = (vecs * (1.0 / np.sqrt(vals))) @ vecs.conj().T
    c = np.kron(s_inv_half, np.eye(dout))
    j = c @ w @ c.conj().T
    j4 = j.reshape(din, dout, din, dout)

    def fwd(x: np.ndarray) -> np.ndarray:
        # J[(a,x),(b,y)] carries the (E_ab -> output)_{xy} matrix elements
        return np.einsum("ab,axby->xy", x, j4)

    return ChannelMap.from_apply(fwd, in_dims, out_dims)
