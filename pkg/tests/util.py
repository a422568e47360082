"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from mesc import operator_core as oc


def random_hermitian(rng: np.random.Generator, dim: int, scale: float = 1.0) -> np.ndarray:
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return scale * (g + g.conj().T) / 2.0


def random_psd(rng: np.random.Generator, dim: int, rank: int | None = None) -> np.ndarray:
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    return g @ g.conj().T


def random_state(rng: np.random.Generator, dim: int, rank: int | None = None) -> np.ndarray:
    rho = random_psd(rng, dim, rank)
    return rho / np.trace(rho).real


def random_orthogonal(rng: np.random.Generator, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(k, k)))
    return q * np.sign(np.diag(r))


def random_choi_of_adjoint(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    """Random CPTP channel, returned as the Choi matrix of its adjoint: a PSD
    matrix J on (input (x) output) with Tr_out J = id_input."""
    d = d_in * d_out
    g = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    w = g @ g.conj().T
    marg = oc.partial_trace(w, [d_in, d_out], [1])
    w_marg, v = np.linalg.eigh(marg)
    inv_sqrt = (v * (1.0 / np.sqrt(w_marg))) @ v.conj().T
    left = np.kron(inv_sqrt, np.eye(d_out))
    return left @ w @ left.conj().T
