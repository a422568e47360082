"""Hermitian operators on tensor products of small systems.

Everything here is phrased with respect to the *normalized* Hilbert-Schmidt
inner product ``<A, B> = Tr(A^dag B) / dim`` and the matching normalized
p-norms ``|||H|||_p = ((1/dim) Tr |H|^p)^(1/p)``.  Under this convention a
standard orthonormal Hermitian basis of a dim-``m`` system has the identity as
element 0 and satisfies ``<B_i, B_j> = delta_ij`` (so ``Tr B_i^2 = m``).

Fourier coefficients of a Hermitian operator with respect to a tensor product
of such bases are real, and Parseval reads
``|||H|||_2^2 = sum_sigma Hhat(sigma)^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np

MultiIndex = Tuple[int, ...]
FourierCoefficients = Dict[MultiIndex, float]

#: coefficients with absolute value at or below this are structural zeros
STRUCTURAL_ZERO = 1e-14

#: total dimension above which dense matrices are refused
DENSE_DIM_LIMIT = 4096

#: eigendecomposition backends must reproduce H v = w v to this residual
EIG_RESIDUAL_TOL = 1e-10

#: an operator counts as positive semidefinite if min eig >= -PSD_TOL * ||H||_inf
PSD_TOL = 1e-9


@dataclass(frozen=True)
class SystemLabel:
    """A named tensor factor of known dimension."""

    name: str
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("system dimension must be >= 1, got %r" % (self.dim,))


# ===========================================================================
# orthonormal Hermitian bases
# ===========================================================================

class HermitianBasis:
    """An orthonormal basis of Hermitian matrices under the normalized inner
    product.  Element 0 is *not* required to be the identity (rotated bases
    produced by input diagonalization may mix it in)."""

    def __init__(self, elements: np.ndarray, validate: bool = True):
        elements = np.asarray(elements, dtype=complex)
        if elements.ndim != 3 or elements.shape[1] != elements.shape[2]:
            raise ValueError("basis elements must be a (k, d, d) array")
        self.elements = elements
        self.dim = elements.shape[1]
        if validate:
            self._validate()

    def _validate(self):
        d = self.dim
        if self.elements.shape[0] != d * d:
            raise ValueError("a basis of a dim-%d system needs %d elements" % (d, d * d))
        herm_err = np.max(np.abs(self.elements - self.elements.conj().transpose(0, 2, 1)))
        if herm_err > 1e-12:
            raise ValueError("basis elements are not Hermitian (max deviation %g)" % herm_err)
        flat = self.elements.reshape(d * d, d * d)
        gram = flat.conj() @ flat.T / d
        gram_err = np.max(np.abs(gram - np.eye(d * d)))
        if gram_err > 1e-10:
            raise ValueError("basis is not orthonormal (max Gram deviation %g)" % gram_err)

    def __len__(self):
        return self.elements.shape[0]

    def gram_matrix(self) -> np.ndarray:
        """Matrix of pairwise normalized inner products (should be identity)."""
        d = self.dim
        flat = self.elements.reshape(len(self), d * d)
        return (flat.conj() @ flat.T / d).real

    def rotate_traceless(self, rotation: np.ndarray) -> "HermitianBasis":
        """Apply a real orthogonal rotation to the traceless sector (elements
        1..d^2-1), keeping element 0 fixed.  Returns a new basis of the same
        kind."""
        d2 = len(self)
        k = d2 - 1
        rotation = np.asarray(rotation, dtype=float)
        if rotation.shape != (k, k):
            raise ValueError("rotation must be (%d, %d)" % (k, k))
        if np.max(np.abs(rotation.T @ rotation - np.eye(k))) > 1e-10:
            raise ValueError("rotation is not orthogonal")
        new = self.elements.copy()
        # column j of the rotation gives the expansion of the new element j+1
        new[1:] = np.tensordot(rotation.T, self.elements[1:], axes=(1, 0))
        return type(self)(new)

    def rotate_full(self, rotation: np.ndarray) -> "HermitianBasis":
        """Apply a real orthogonal rotation mixing *all* elements (including
        element 0).  The result is a plain HermitianBasis."""
        d2 = len(self)
        rotation = np.asarray(rotation, dtype=float)
        if rotation.shape != (d2, d2):
            raise ValueError("rotation must be (%d, %d)" % (d2, d2))
        if np.max(np.abs(rotation.T @ rotation - np.eye(d2))) > 1e-10:
            raise ValueError("rotation is not orthogonal")
        new = np.tensordot(rotation.T, self.elements, axes=(1, 0))
        return HermitianBasis(new)


class StandardBasis(HermitianBasis):
    """A standard basis: orthonormal, Hermitian, with element 0 the identity.

    ``make_standard_basis`` builds the canonical representative (a rescaled
    generalized Gell-Mann family); any rotation of its traceless sector is a
    standard basis again.
    """

    def _validate(self):
        super()._validate()
        id_err = np.max(np.abs(self.elements[0] - np.eye(self.dim)))
        if id_err > 1e-12:
            raise ValueError("element 0 of a standard basis must be the identity")


def make_standard_basis(dim: int) -> StandardBasis:
    """Canonical standard basis of a dim-``dim`` system.

    Ordering: identity, then symmetric off-diagonal pairs (i<j lexicographic),
    then antisymmetric pairs, then the diagonal family.  All elements are
    scaled so that ``Tr B^2 = dim``.  For ``dim == 2`` this is exactly
    ``[I, X, Y, Z]``.
    """
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    elems = [np.eye(dim, dtype=complex)]
    scale = math.sqrt(dim / 2.0) if dim > 1 else 1.0
    for i in range(dim):
        for j in range(i + 1, dim):
            m = np.zeros((dim, dim), dtype=complex)
            m[i, j] = m[j, i] = 1.0
            elems.append(scale * m)
    for i in range(dim):
        for j in range(i + 1, dim):
            m = np.zeros((dim, dim), dtype=complex)
            m[i, j] = -1j
            m[j, i] = 1j
            elems.append(scale * m)
    for l in range(1, dim):
        diag = np.zeros(dim, dtype=complex)
        diag[:l] = 1.0
        diag[l] = -l
        # Tr m^2 = l(l+1), rescale to dim
        elems.append(np.diag(diag) * math.sqrt(dim / (l * (l + 1.0))))
    return StandardBasis(np.stack(elems))


# ===========================================================================
# the operator container
# ===========================================================================

class HermitianTensorOperator:
    """A Hermitian operator on a tensor product of labeled systems.

    Dense storage is kept whenever the total dimension is at most
    ``DENSE_DIM_LIMIT``; beyond that only a Fourier view (coefficients with
    respect to explicit bases) is allowed.
    """

    def __init__(self, systems: Sequence[SystemLabel], dense: np.ndarray | None = None,
                 fourier: FourierCoefficients | None = None,
                 bases: Sequence[HermitianBasis] | None = None, validate: bool = True):
        self.systems = tuple(systems)
        self.dim = int(np.prod([s.dim for s in self.systems])) if self.systems else 1
        if dense is None and fourier is None:
            raise ValueError("need a dense matrix or Fourier coefficients")
        if dense is not None:
            # Refuse before converting: the complex cast of an oversized dense
            # matrix can be gigabytes.
            if self.dim > DENSE_DIM_LIMIT:
                raise ValueError("dense storage refused above total dimension %d"
                                 % DENSE_DIM_LIMIT)
            dense = np.asarray(dense, dtype=complex)
            if dense.shape != (self.dim, self.dim):
                raise ValueError("dense matrix has shape %r, expected (%d, %d)"
                                 % (dense.shape, self.dim, self.dim))
            if validate and np.max(np.abs(dense - dense.conj().T)) > 1e-10 * max(
                    1.0, float(np.max(np.abs(dense)))):
                raise ValueError("matrix is not Hermitian")
        if fourier is not None and bases is None:
            raise ValueError("Fourier coefficients require the bases they refer to")
        self.dense = dense
        self.fourier = fourier
        self.bases = tuple(bases) if bases is not None else None

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(s.dim for s in self.systems)

    def matrix(self) -> np.ndarray:
        """Dense matrix, synthesizing from Fourier data if necessary."""
        if self.dense is not None:
            return self.dense
        if self.dim > DENSE_DIM_LIMIT:
            raise ValueError("operator is too large for dense synthesis (dim %d)" % self.dim)
        return fourier_synthesize(self.fourier, self.bases)


# ===========================================================================
# inner products, norms, spectra
# ===========================================================================

def inner_product(a: np.ndarray, b: np.ndarray) -> complex:
    """Normalized Hilbert-Schmidt inner product Tr(a^dag b)/dim."""
    a = np.asarray(a)
    b = np.asarray(b)
    return complex(np.vdot(a, b)) / a.shape[0]


def eigh_checked(h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition with the residual contract ||H v - w v|| <= 1e-10
    (relative to ||H||) enforced."""
    h = np.asarray(h, dtype=complex)
    w, v = np.linalg.eigh(h)
    scale = max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    resid = np.max(np.abs(h @ v - v * w)) if h.size else 0.0
    if resid > EIG_RESIDUAL_TOL * scale:
        raise ArithmeticError("eigendecomposition residual %g exceeds contract" % resid)
    return w, v


def normalized_p_norm(h: np.ndarray, p: float) -> float:
    """|||H|||_p = ((1/dim) Tr |H|^p)^(1/p); p = inf gives the spectral norm."""
    if p < 1:
        raise ValueError("p must be >= 1")
    w = np.linalg.eigvalsh(np.asarray(h, dtype=complex))
    if math.isinf(p):
        return float(np.max(np.abs(w))) if w.size else 0.0
    m = w.shape[0]
    return float((np.sum(np.abs(w) ** p) / m) ** (1.0 / p))


def zeta_trace(h: np.ndarray) -> float:
    """Tr zeta(H): the sum of squared negative eigenvalues.

    Equals the squared (unnormalized) 2-norm distance from H to the positive
    semidefinite cone.
    """
    w = np.linalg.eigvalsh(np.asarray(h, dtype=complex))
    neg = np.minimum(w, 0.0)
    return float(np.sum(neg * neg))


def positive_part(h: np.ndarray) -> np.ndarray:
    """Spectral projection onto the PSD cone: eigenvalues clipped at 0."""
    w, v = eigh_checked(h)
    return (v * np.maximum(w, 0.0)) @ v.conj().T


def pseudo_inverse(h: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Moore-Penrose inverse of a Hermitian matrix via its spectrum.

    Eigenvalues with |w| <= tol * max|w| are treated as exact zeros.
    """
    w, v = eigh_checked(h)
    scale = float(np.max(np.abs(w))) if w.size else 0.0
    inv = np.zeros_like(w)
    if scale > 0:
        keep = np.abs(w) > tol * scale
        inv[keep] = 1.0 / w[keep]
    return (v * inv) @ v.conj().T


def is_psd(h: np.ndarray, tol: float = PSD_TOL) -> bool:
    """PSD check with the relative tolerance min eig >= -tol * ||H||_inf."""
    w = np.linalg.eigvalsh(np.asarray(h, dtype=complex))
    if w.size == 0:
        return True
    scale = max(float(np.max(np.abs(w))), 1e-300)
    return bool(w[0] >= -tol * scale)


# ===========================================================================
# tensor bookkeeping: partial traces, permutations, embeddings
# ===========================================================================

def partial_trace(m: np.ndarray, dims: Sequence[int], traced: Iterable[int]) -> np.ndarray:
    """Trace out the systems listed in ``traced`` (indices into ``dims``)."""
    dims = list(dims)
    traced = sorted(set(traced))
    n = len(dims)
    for i in traced:
        if not 0 <= i < n:
            raise ValueError("traced index %d out of range" % i)
    t = np.asarray(m).reshape(dims + dims)
    # contract row/column axes of every traced system, highest index first so
    # that earlier positions stay valid
    for count, i in enumerate(reversed(traced)):
        cur_n = n - count
        t = np.trace(t, axis1=i, axis2=i + cur_n)
    keep = [d for j, d in enumerate(dims) if j not in traced]
    dk = int(np.prod(keep)) if keep else 1
    return t.reshape(dk, dk)


def permute_systems(m: np.ndarray, dims: Sequence[int], perm: Sequence[int]) -> np.ndarray:
    """Reorder tensor factors: new position k holds old system perm[k]."""
    dims = list(dims)
    n = len(dims)
    perm = list(perm)
    if sorted(perm) != list(range(n)):
        raise ValueError("perm must be a permutation of 0..%d" % (n - 1))
    t = np.asarray(m).reshape(dims + dims)
    axes = perm + [p + n for p in perm]
    new_dims = [dims[p] for p in perm]
    d = int(np.prod(new_dims)) if new_dims else 1
    return t.transpose(axes).reshape(d, d)


def kron_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Kronecker product of a list (empty list gives the 1x1 identity)."""
    out = np.eye(1, dtype=complex)
    for m in mats:
        out = np.kron(out, m)
    return out


# ===========================================================================
# Fourier expansion and synthesis
# ===========================================================================

def fourier_expand(h: np.ndarray, bases: Sequence[HermitianBasis],
                   tol: float = STRUCTURAL_ZERO) -> FourierCoefficients:
    """Expand ``h`` over the tensor product of ``bases``.

    Returns a sparse map from multi-indices to real coefficients; entries with
    absolute value <= ``tol`` are dropped.  The coefficient tensor is computed
    axis by axis, so the cost is a handful of small tensordots rather than a
    quadratic sweep over basis pairs.
    """
    tensor = fourier_coefficient_tensor(h, bases)
    coeffs: FourierCoefficients = {}
    flat = tensor.ravel()
    shape = tensor.shape
    nz = np.nonzero(np.abs(flat) > tol)[0]
    for idx in nz:
        coeffs[tuple(int(x) for x in np.unravel_index(idx, shape))] = float(flat[idx])
    return coeffs


def fourier_coefficient_tensor(h: np.ndarray, bases: Sequence[HermitianBasis]) -> np.ndarray:
    """Dense coefficient tensor of shape (d_1^2, ..., d_n^2)."""
    dims = [b.dim for b in bases]
    total = int(np.prod(dims)) if dims else 1
    h = np.asarray(h, dtype=complex)
    if h.shape != (total, total):
        raise ValueError("operator shape %r does not match bases (total dim %d)"
                         % (h.shape, total))
    if not dims:
        return np.array(float(h[0, 0].real)).reshape(())
    t = h.reshape(dims + dims)
    # interleave row/column axes into (i1, j1, i2, j2, ...)
    order = []
    for k in range(len(dims)):
        order += [k, k + len(dims)]
    t = t.transpose(order)
    for b in bases:
        # contract the leading (i, j) pair; the new coefficient axis is moved
        # to the back so axes stay in system order
        t = np.tensordot(b.elements.conj(), t, axes=([1, 2], [0, 1]))
        t = np.moveaxis(t, 0, -1)
    t = t / total
    imag = float(np.max(np.abs(t.imag))) if t.size else 0.0
    if imag > 1e-10:
        raise ValueError("operator is not Hermitian enough for a real expansion "
                         "(max imaginary coefficient %g)" % imag)
    return t.real


def fourier_synthesize(coeffs: FourierCoefficients | np.ndarray,
                       bases: Sequence[HermitianBasis]) -> np.ndarray:
    """Rebuild the dense operator sum_sigma c(sigma) B_sigma."""
    dims = [b.dim for b in bases]
    shape = tuple(d * d for d in dims)
    if isinstance(coeffs, dict):
        tensor = np.zeros(shape if shape else ())
        for sigma, c in coeffs.items():
            if len(sigma) != len(dims):
                raise ValueError("multi-index %r does not match %d systems"
                                 % (sigma, len(dims)))
            tensor[sigma] = c
    else:
        tensor = np.asarray(coeffs, dtype=float)
        if tensor.shape != shape:
            raise ValueError("coefficient tensor shape %r, expected %r"
                             % (tensor.shape, shape))
    if not dims:
        return np.array([[complex(tensor)]])
    t = tensor.astype(complex)
    for b in bases:
        # consume the leading coefficient axis, appending (i_k, j_k) at the end
        t = np.tensordot(t, b.elements, axes=([0], [0]))
    # axes are now (i1, j1, i2, j2, ...): regroup into rows/columns
    n = len(dims)
    order = [2 * k for k in range(n)] + [2 * k + 1 for k in range(n)]
    total = int(np.prod(dims))
    return t.transpose(order).reshape(total, total)


# ===========================================================================
# degree, truncation, influence, depolarization
# ===========================================================================

def multi_index_weight(sigma: MultiIndex) -> int:
    """Number of non-identity slots of a multi-index."""
    return sum(1 for s in sigma if s != 0)


def degree(coeffs: FourierCoefficients, tol: float = STRUCTURAL_ZERO) -> int:
    """Largest |sigma| carrying a coefficient above the structural-zero tol."""
    deg = 0
    for sigma, c in coeffs.items():
        if abs(c) > tol:
            deg = max(deg, multi_index_weight(sigma))
    return deg


def truncate_degree(coeffs: FourierCoefficients, t: int
                    ) -> Tuple[FourierCoefficients, FourierCoefficients]:
    """Split coefficients into the (low, high) parts with |sigma| <= t and > t."""
    if t < 0:
        raise ValueError("truncation degree must be >= 0, got %r" % (t,))
    low: FourierCoefficients = {}
    high: FourierCoefficients = {}
    for sigma, c in coeffs.items():
        (low if multi_index_weight(sigma) <= t else high)[sigma] = c
    return low, high


def influence(coeffs: FourierCoefficients, i: int) -> float:
    """Fourier-side influence of system ``i``: coefficient mass with sigma_i != 0."""
    return float(sum(c * c for sigma, c in coeffs.items() if sigma[i] != 0))


def total_influence(coeffs: FourierCoefficients) -> float:
    """Sum of the influences, i.e. sum_sigma |sigma| c(sigma)^2."""
    return float(sum(multi_index_weight(sigma) * c * c for sigma, c in coeffs.items()))


def influence_dense(h: np.ndarray, dims: Sequence[int], i: int) -> float:
    """Definition-side influence |||H - (id/m) (x) Tr_i H|||_2^2."""
    dims = list(dims)
    m = dims[i]
    rest = partial_trace(h, dims, [i])
    rest_dims = dims[:i] + dims[i + 1:]
    left = int(np.prod(dims[:i])) if dims[:i] else 1
    right = int(np.prod(dims[i + 1:])) if dims[i + 1:] else 1
    rest_t = rest.reshape(left, right, left, right)
    avg = np.einsum('ab,xuyv->xauybv', np.eye(m, dtype=complex) / m, rest_t)
    avg = avg.reshape(h.shape)
    return normalized_p_norm(h - avg, 2) ** 2


def depolarize(h: np.ndarray, dims: Sequence[int], gamma: float,
               targets: Iterable[int] | None = None) -> np.ndarray:
    """Apply the depolarizing map D_gamma(P) = gamma P + (1-gamma) Tr(P) id/m
    to each target system (all systems by default).

    On Fourier coefficients this multiplies c(sigma) by gamma^(number of
    non-identity target slots), so it damps high-degree content; it is a
    quantum operation for gamma in [-1/(m^2-1), 1].
    """
    dims = list(dims)
    if targets is None:
        targets = range(len(dims))
    out = np.asarray(h, dtype=complex)
    for i in targets:
        m = dims[i]
        traced = partial_trace(out, dims, [i])
        left = int(np.prod(dims[:i])) if dims[:i] else 1
        right = int(np.prod(dims[i + 1:])) if dims[i + 1:] else 1
        rest_t = traced.reshape(left, right, left, right)
        avg = np.einsum('ab,xuyv->xauybv', np.eye(m, dtype=complex) / m, rest_t)
        out = gamma * out + (1.0 - gamma) * avg.reshape(out.shape)
    return out


def depolarize_coeffs(coeffs: FourierCoefficients, gamma: float,
                      targets: Iterable[int] | None = None) -> FourierCoefficients:
    """Coefficient-side depolarization: scale by gamma^(non-identity targets)."""
    out: FourierCoefficients = {}
    for sigma, c in coeffs.items():
        if targets is None:
            k = multi_index_weight(sigma)
        else:
            k = sum(1 for i in targets if sigma[i] != 0)
        out[sigma] = c * (gamma ** k)
    return out
