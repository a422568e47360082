"""Hot numerical kernels with a numba fast path and a pure-numpy fallback.

The only genuinely hot loops in the package are the Monte Carlo evaluations of
sparse polynomial expansions (multilinear or Hermite) at large sample batches.
Those are implemented twice: once with ``numba.njit`` and once with plain
numpy.  The backend is chosen at import time; setting the environment variable
``MESC_PURE_NUMPY=1`` forces the numpy path (useful for debugging and for the
benchmark in ``benchmarks/bench_poly_eval.py``).

Term layout
-----------
A batch of ``n_polys`` polynomials over the same variables is flattened into

- ``term_vars``  int64[K]  variable index of each factor,
- ``term_degs``  int64[K]  Hermite degree of each factor (>= 1),
- ``term_offsets`` int64[T+1]  factor range of term ``t`` is
  ``term_offsets[t]:term_offsets[t+1]`` (empty range = constant term),
- ``term_poly``  int64[T]  which polynomial the term belongs to,
- ``term_coeff`` float64[T]  the coefficient.

``herm_values`` is a float64 array of shape ``(N, n_vars, max_deg + 1)``
holding normalized Hermite polynomial values of every variable at every
sample; column ``0`` is identically 1 and column ``1`` is the sample itself.
"""

from __future__ import annotations

import os

import numpy as np

_FORCED_NUMPY = os.environ.get("MESC_PURE_NUMPY", "").strip().lower() in ("1", "true", "yes")

try:  # pragma: no cover - exercised by the benchmark under both settings
    if _FORCED_NUMPY:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # fallback decorator, keeps the source identical
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def kernel_backend() -> str:
    """Name of the active backend: ``"numba"`` or ``"numpy"``."""
    return "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# pure numpy implementation
# ---------------------------------------------------------------------------

def eval_poly_batch_numpy(herm_values, term_vars, term_degs, term_offsets, term_poly,
                          term_coeff, n_polys):
    """Evaluate a flattened batch of polynomials at all samples.

    Returns float64[N, n_polys].
    """
    n_samples = herm_values.shape[0]
    out = np.zeros((n_samples, n_polys))
    n_terms = term_poly.shape[0]
    for t in range(n_terms):
        lo, hi = term_offsets[t], term_offsets[t + 1]
        acc = np.full(n_samples, term_coeff[t])
        for k in range(lo, hi):
            acc = acc * herm_values[:, term_vars[k], term_degs[k]]
        out[:, term_poly[t]] += acc
    return out


# ---------------------------------------------------------------------------
# numba implementation (same semantics)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _eval_poly_batch_numba(herm_values, term_vars, term_degs, term_offsets, term_poly,
                           term_coeff, n_polys):  # pragma: no cover - compiled
    n_samples = herm_values.shape[0]
    out = np.zeros((n_samples, n_polys))
    n_terms = term_poly.shape[0]
    for t in range(n_terms):
        lo = term_offsets[t]
        hi = term_offsets[t + 1]
        c = term_coeff[t]
        p = term_poly[t]
        for s in range(n_samples):
            acc = c
            for k in range(lo, hi):
                acc *= herm_values[s, term_vars[k], term_degs[k]]
            out[s, p] += acc
    return out


def eval_poly_batch(herm_values, term_vars, term_degs, term_offsets, term_poly,
                    term_coeff, n_polys):
    """Dispatch to the active backend."""
    if HAS_NUMBA:
        return _eval_poly_batch_numba(herm_values, term_vars, term_degs, term_offsets,
                                      term_poly, term_coeff, n_polys)
    return eval_poly_batch_numpy(herm_values, term_vars, term_degs, term_offsets,
                                 term_poly, term_coeff, n_polys)


def hermite_value_table(samples: np.ndarray, max_deg: int) -> np.ndarray:
    """Normalized (probabilists') Hermite values H_0..H_max_deg of each entry.

    ``samples`` has shape (N, n_vars); the result has shape
    (N, n_vars, max_deg + 1).  The recurrence is
    H_{r+1}(x) = (x*H_r(x) - sqrt(r)*H_{r-1}(x)) / sqrt(r+1), with H_0 = 1 and
    H_1 = x, which keeps E[H_r(g)^2] = 1 under a standard Gaussian g.
    """
    n, v = samples.shape
    table = np.empty((n, v, max_deg + 1))
    table[:, :, 0] = 1.0
    if max_deg >= 1:
        table[:, :, 1] = samples
    for r in range(1, max_deg):
        table[:, :, r + 1] = (samples * table[:, :, r]
                              - np.sqrt(r) * table[:, :, r - 1]) / np.sqrt(r + 1)
    return table
