"""Noisy maximally-entangled states and correlation structure of inputs.

Two spectral decompositions drive everything downstream: the maximal
correlation of a bipartite state with maximally mixed marginals (the top
singular value of its traceless correlation matrix, together with bases that
diagonalize that matrix), and the analogous singular-value decomposition of a
tripartite input state against a fixed referee basis element.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from . import operator_core as oc

MARGINAL_TOL = 1e-8


def mes_state(m: int) -> np.ndarray:
    """Density matrix of the m-dimensional maximally entangled pure state."""
    if m < 2:
        raise ValueError("need dimension at least 2")
    vec = np.zeros(m * m, dtype=complex)
    for i in range(m):
        vec[i * m + i] = 1.0 / np.sqrt(m)
    return np.outer(vec, vec.conj())


def depolarized_mes_state(m: int, eps: float) -> np.ndarray:
    if not 0.0 <= eps <= 1.0:
        raise ValueError("noise parameter must lie in [0, 1]")
    return (1.0 - eps) * mes_state(m) + eps * np.eye(m * m) / (m * m)


def _check_marginals(psi: np.ndarray, s_dim: int, t_dim: int,
                     tol: float = MARGINAL_TOL) -> None:
    psi = np.asarray(psi)
    if psi.shape != (s_dim * t_dim, s_dim * t_dim):
        raise ValueError("state has shape %r, expected dimension %d"
                         % (psi.shape, s_dim * t_dim))
    marg_s = oc.partial_trace(psi, [s_dim, t_dim], [1])
    marg_t = oc.partial_trace(psi, [s_dim, t_dim], [0])
    res = max(float(np.max(np.abs(marg_s - np.eye(s_dim) / s_dim))),
              float(np.max(np.abs(marg_t - np.eye(t_dim) / t_dim))))
    if res > tol:
        raise ValueError("marginals are not maximally mixed "
                         "(residual %.3e > %.1e); the correlation "
                         "decomposition is only defined for uniform "
                         "marginals" % (res, tol))


def _correlation_matrix(psi: np.ndarray, basis_s: oc.HermitianBasis,
                        basis_t: oc.HermitianBasis) -> np.ndarray:
    """C_ij = Tr[(S_i (x) T_j) psi] over the traceless basis elements.

    The elements are kept at their standard normalization (squared trace
    equal to the dimension), which is exactly unit normalized 2-norm.
    """
    s_dim, t_dim = basis_s.dim, basis_t.dim
    s_stack = basis_s.elements[1:]
    t_stack = basis_t.elements[1:]
    psi4 = np.asarray(psi, dtype=complex).reshape(s_dim, t_dim, s_dim, t_dim)
    c = np.einsum("iab,jcd,bdac->ij", s_stack, t_stack, psi4)
    if c.size and np.max(np.abs(c.imag)) > 1e-10:
        raise ArithmeticError("correlation matrix has imaginary part %.3e"
                              % np.max(np.abs(c.imag)))
    return c.real


class NoisyMesProfile:
    """A bipartite state with uniform marginals and its aligned form.

    `spectrum[0]` is always 1 (the identity pair); `spectrum[1:]` are the
    singular values of the traceless correlation matrix in decreasing order,
    so `spectrum[1]` is the maximal correlation.  In the aligned bases the
    cross-correlations Tr[(S_i (x) T_j) psi] vanish for i != j.
    """

    def __init__(self, psi: np.ndarray, s_dim: int, t_dim: int,
                 spectrum: np.ndarray, basis_s: oc.HermitianBasis,
                 basis_t: oc.HermitianBasis):
        self.psi = np.asarray(psi, dtype=complex)
        self.s_dim = int(s_dim)
        self.t_dim = int(t_dim)
        self.spectrum = np.asarray(spectrum, dtype=float)
        self.basis_s = basis_s
        self.basis_t = basis_t

    @property
    def rho(self) -> float:
        """Maximal correlation: the leading traceless singular value."""
        return float(self.spectrum[1]) if self.spectrum.size > 1 else 0.0

    def alignment_residual(self) -> float:
        """max |Tr[(S_i (x) T_j) psi] - delta_ij c_i| over the aligned bases."""
        c = _correlation_matrix(self.psi, self.basis_s, self.basis_t)
        k = min(c.shape) if c.size else 0
        target = np.zeros_like(c)
        for i in range(k):
            target[i, i] = self.spectrum[1 + i]
        off = float(np.max(np.abs(c - target))) if c.size else 0.0
        # identity-vs-traceless correlations vanish for uniform marginals
        return off


def maximal_correlation(psi: np.ndarray, dims: Sequence[int]) -> float:
    """Largest correlation of traceless unit observables across the split.

    `dims` gives the two factor dimensions.  Requires both marginals to be
    maximally mixed; the supremum over unit-norm traceless Hermitian pairs is
    the top singular value of the correlation matrix because the objective is
    bilinear on the two unit spheres.
    """
    s_dim, t_dim = (int(d) for d in dims)
    _check_marginals(psi, s_dim, t_dim)
    c = _correlation_matrix(psi, oc.make_standard_basis(s_dim),
                            oc.make_standard_basis(t_dim))
    if c.size == 0:
        return 0.0
    return float(np.linalg.svd(c, compute_uv=False)[0])


def align_bases(psi: np.ndarray, dims: Sequence[int]) -> NoisyMesProfile:
    """Rotate the traceless sectors so the correlation matrix is diagonal.

    Returns the profile carrying the rotated standard bases (identity kept at
    index 0) and the correlation spectrum (1, c_1 >= c_2 >= ... >= 0).
    """
    s_dim, t_dim = (int(d) for d in dims)
    _check_marginals(psi, s_dim, t_dim)
    basis_s = oc.make_standard_basis(s_dim)
    basis_t = oc.make_standard_basis(t_dim)
    c = _correlation_matrix(psi, basis_s, basis_t)
    u, sing, vt = np.linalg.svd(c)
    aligned_s = basis_s.rotate_traceless(u)
    aligned_t = basis_t.rotate_traceless(vt.T)
    spectrum = np.concatenate([[1.0], sing])
    return NoisyMesProfile(psi, s_dim, t_dim, spectrum, aligned_s, aligned_t)


def depolarized_mes(m: int, eps: float) -> NoisyMesProfile:
    """Profile of (1-eps) |MES><MES| + eps id/m (x) id/m."""
    return align_bases(depolarized_mes_state(m, eps), (m, m))


class InputDiagonalization:
    """Singular structure of a tripartite input state against one referee
    basis element: rotated full operator bases for the first two factors and
    the nonnegative diagonal values k_p <= 1."""

    def __init__(self, r_index: int, basis_p: oc.HermitianBasis,
                 basis_q: oc.HermitianBasis, k: np.ndarray):
        self.r_index = int(r_index)
        self.basis_p = basis_p
        self.basis_q = basis_q
        self.k = np.asarray(k, dtype=float)

    def residual(self, phi_in: np.ndarray, r_basis: oc.HermitianBasis) -> float:
        """max_p,q |Tr[(P_p (x) Q_q (x) R_r) phi_in] - delta_pq k_p|."""
        m = _input_correlation_matrix(phi_in, self.basis_p, self.basis_q,
                                      r_basis, self.r_index)
        target = np.zeros_like(m)
        for p in range(min(m.shape)):
            target[p, p] = self.k[p] if p < self.k.size else 0.0
        return float(np.max(np.abs(m - target)))


def _input_correlation_matrix(phi_in: np.ndarray, basis_p: oc.HermitianBasis,
                              basis_q: oc.HermitianBasis,
                              r_basis: oc.HermitianBasis,
                              r_index: int) -> np.ndarray:
    p_dim, q_dim, r_dim = basis_p.dim, basis_q.dim, r_basis.dim
    pt = basis_p.elements / np.sqrt(p_dim)
    qt = basis_q.elements / np.sqrt(q_dim)
    rt = r_basis.elements[r_index] / np.sqrt(r_dim)
    phi6 = np.asarray(phi_in, dtype=complex).reshape(
        p_dim, q_dim, r_dim, p_dim, q_dim, r_dim)
    m = np.einsum("iab,jcd,ef,bdface->ij", pt, qt, rt, phi6)
    if np.max(np.abs(m.imag)) > 1e-10:
        raise ArithmeticError("input correlation matrix has imaginary part")
    return m.real


def diagonalize_input(phi_in: np.ndarray, dims: Sequence[int],
                      r_basis: oc.HermitianBasis,
                      r_index: int) -> InputDiagonalization:
    """Diagonalize the (first factor x second factor) correlations of a
    tripartite state against the r-th referee basis element.

    The two rotated bases are full operator bases (the identity is mixed into
    the rotation); the diagonal values satisfy 0 <= k_p <= 1.
    """
    p_dim, q_dim, r_dim = (int(d) for d in dims)
    if r_basis.dim != r_dim:
        raise ValueError("referee basis dimension %d != factor dimension %d"
                         % (r_basis.dim, r_dim))
    phi_in = np.asarray(phi_in, dtype=complex)
    if phi_in.shape != (p_dim * q_dim * r_dim,) * 2:
        raise ValueError("input state has shape %r, expected dimension %d"
                         % (phi_in.shape, p_dim * q_dim * r_dim))
    basis_p = oc.make_standard_basis(p_dim)
    basis_q = oc.make_standard_basis(q_dim)
    m = _input_correlation_matrix(phi_in, basis_p, basis_q, r_basis, r_index)
    u, sing, vt = np.linalg.svd(m)
    if sing.size and sing[0] > 1.0 + 1e-9:
        raise ArithmeticError("correlation singular value %.6f exceeds 1; "
                              "the input is not a valid state" % sing[0])
    return InputDiagonalization(r_index, basis_p.rotate_full(u),
                                basis_q.rotate_full(vt.T),
                                np.minimum(sing, 1.0))
