"""Gaussian-space analysis: Hermite expansions, correlated sampling, and
operator-valued polynomials.

Scalar functions of Gaussian inputs are represented by sparse expansions in
normalized (probabilists') Hermite polynomials; multilinear polynomials get a
dedicated representation because several pipeline stages are exact only on
them.  Operator-valued random objects pair each operator-basis multi-index
with such a scalar polynomial.  Monte Carlo estimation runs through a
counter-based Gaussian sampler so every expectation is reproducible from a
64-bit seed, chunk by chunk, independent of threading.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import _kernels
from . import operator_core as oc

COEFF_TRUNC = 1e-14
CHUNK = 4096

# sparse Hermite multi-index: sorted ((variable, degree), ...) with degree >= 1
HermiteKey = Tuple[Tuple[int, int], ...]
SubsetKey = Tuple[int, ...]


def _normalize_hermite_key(pairs: Iterable[Tuple[int, int]], n: int) -> HermiteKey:
    seen = {}
    for var, deg in pairs:
        var, deg = int(var), int(deg)
        if not 0 <= var < n:
            raise ValueError("variable %d out of range for %d variables" % (var, n))
        if deg < 0:
            raise ValueError("negative Hermite degree")
        if deg == 0:
            continue
        if var in seen:
            raise ValueError("variable %d repeated in multi-index" % var)
        seen[var] = deg
    return tuple(sorted(seen.items()))


def _normalize_subset(subset: Iterable[int], n: int) -> SubsetKey:
    out = tuple(sorted(int(v) for v in subset))
    if len(set(out)) != len(out):
        raise ValueError("repeated variable in subset")
    if out and (out[0] < 0 or out[-1] >= n):
        raise ValueError("variable out of range")
    return out


class HermiteExpansion:
    """Finite expansion f = sum_sigma c_sigma H_sigma over n Gaussian inputs."""

    def __init__(self, n: int, coeffs: Mapping[Iterable[Tuple[int, int]], float]):
        self.n = int(n)
        table: Dict[HermiteKey, float] = {}
        for key, c in coeffs.items():
            k = _normalize_hermite_key(key, self.n)
            table[k] = table.get(k, 0.0) + float(c)
        self.coeffs = table

    # -- structure ----------------------------------------------------------

    def degree(self) -> int:
        return max((sum(d for _, d in k) for k in self.coeffs), default=0)

    def support_vars(self) -> set:
        out = set()
        for k in self.coeffs:
            out.update(v for v, _ in k)
        return out

    def is_multilinear(self) -> bool:
        return all(d == 1 for k in self.coeffs for _, d in k)

    def two_norm_sq(self) -> float:
        return float(sum(c * c for c in self.coeffs.values()))

    def variance(self) -> float:
        return float(sum(c * c for k, c in self.coeffs.items() if k))

    def influence(self, i: int) -> float:
        return float(sum(c * c for k, c in self.coeffs.items()
                         if any(v == i for v, _ in k)))

    # -- algebra ------------------------------------------------------------

    def scale(self, t: float) -> "HermiteExpansion":
        return HermiteExpansion(self.n, {k: c * t for k, c in self.coeffs.items()})

    def add(self, other: "HermiteExpansion") -> "HermiteExpansion":
        if other.n != self.n:
            raise ValueError("variable counts differ")
        out = dict(self.coeffs)
        for k, c in other.coeffs.items():
            out[k] = out.get(k, 0.0) + c
        return HermiteExpansion(self.n, {k: c for k, c in out.items()
                                         if abs(c) > COEFF_TRUNC})

    def ou(self, nu: float) -> "HermiteExpansion":
        if not 0.0 <= nu <= 1.0:
            raise ValueError("smoothing parameter must lie in [0, 1]")
        out = {k: c * nu ** sum(d for _, d in k)
               for k, c in self.coeffs.items()}
        return HermiteExpansion(
            self.n, {k: c for k, c in out.items() if abs(c) > COEFF_TRUNC})

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, x: np.ndarray) -> Union[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.shape[1] != self.n:
            raise ValueError("expected %d variables, got %d" % (self.n, batch.shape[1]))
        layout = _kernel_layout([self], self.n)
        vals = _evaluate_layout(layout, batch)[:, 0]
        return float(vals[0]) if single else vals


class MultilinearPolynomial:
    """Multilinear polynomial: coefficients on subsets of the n variables."""

    def __init__(self, n: int, coeffs: Mapping[Iterable[int], float]):
        self.n = int(n)
        table: Dict[SubsetKey, float] = {}
        for key, c in coeffs.items():
            k = _normalize_subset(key, self.n)
            table[k] = table.get(k, 0.0) + float(c)
        self.coeffs = table

    def degree(self) -> int:
        return max((len(k) for k in self.coeffs), default=0)

    def two_norm_sq(self) -> float:
        return float(sum(c * c for c in self.coeffs.values()))

    def variance(self) -> float:
        return float(sum(c * c for k, c in self.coeffs.items() if k))

    def influence(self, i: int) -> float:
        return float(sum(c * c for k, c in self.coeffs.items() if i in k))

    def scale(self, t: float) -> "MultilinearPolynomial":
        return MultilinearPolynomial(self.n, {k: c * t for k, c in self.coeffs.items()})

    def add(self, other: "MultilinearPolynomial") -> "MultilinearPolynomial":
        if other.n != self.n:
            raise ValueError("variable counts differ")
        out = dict(self.coeffs)
        for k, c in other.coeffs.items():
            out[k] = out.get(k, 0.0) + c
        return MultilinearPolynomial(self.n, out)

    def to_hermite(self) -> HermiteExpansion:
        return HermiteExpansion(
            self.n, {tuple((v, 1) for v in k): c for k, c in self.coeffs.items()})

    def evaluate(self, x: np.ndarray) -> Union[float, np.ndarray]:
        return self.to_hermite().evaluate(x)


AnyPolynomial = Union[HermiteExpansion, MultilinearPolynomial]


# ---------------------------------------------------------------------------
# Hermite polynomials and closed-form coefficient maps
# ---------------------------------------------------------------------------

def hermite(r: int, x) -> Union[float, np.ndarray]:
    """Normalized Hermite value H_r(x); orthonormal under the standard
    Gaussian: E[H_r(g) H_s(g)] = delta_rs."""
    if r < 0:
        raise ValueError("negative degree")
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if r == 0:
        return float(h_prev) if x.ndim == 0 else h_prev
    h = x.copy()
    for k in range(1, r):
        h, h_prev = (x * h - math.sqrt(k) * h_prev) / math.sqrt(k + 1), h
    return float(h) if x.ndim == 0 else h


def hermite_multi(sigma: Sequence[int], x: Sequence[float]) -> float:
    """Product of per-variable Hermite values for a full multi-index."""
    if len(sigma) != len(x):
        raise ValueError("multi-index and point have different lengths")
    out = 1.0
    for r, xi in zip(sigma, x):
        out *= hermite(int(r), float(xi))
    return out


def hermite_monomial_coeffs(r: int) -> np.ndarray:
    """Coefficients a with H_r(x) = sum_m a[m] x^m (normalized H_r)."""
    if r < 0:
        raise ValueError("negative degree")
    # integer coefficients of the unnormalized polynomials via the recurrence
    prev = [1]
    if r == 0:
        return np.array([1.0])
    cur = [0, 1]
    for k in range(1, r):
        nxt = [0] * (k + 2)
        for m, c in enumerate(cur):
            nxt[m + 1] += c
        for m, c in enumerate(prev):
            nxt[m] -= k * c
        prev, cur = cur, nxt
    return np.array(cur, dtype=float) / math.sqrt(math.factorial(r))


def hermite_coeffs_of_power(m: int) -> np.ndarray:
    """Coefficients a with x^m = sum_r a[r] H_r(x) (normalized H_r)."""
    if m < 0:
        raise ValueError("negative power")
    out = np.zeros(m + 1)
    for r in range(m % 2, m + 1, 2):
        j = (m - r) // 2
        out[r] = (math.factorial(m)
                  / (math.sqrt(math.factorial(r)) * 2 ** j * math.factorial(j)))
    return out


def hermite_linear_form_coeffs(u: Sequence[float], r: int,
                               tol: float = COEFF_TRUNC) -> Dict[HermiteKey, float]:
    """Hermite coefficients of H_r(u . x) for a unit vector u.

    The expansion runs over multi-indices of total degree exactly r supported
    on the nonzero entries of u, with coefficient
    sqrt(r! / prod sigma_i!) * prod u_i^{sigma_i}.
    """
    u = np.asarray(u, dtype=float)
    if abs(float(u @ u) - 1.0) > 1e-10:
        raise ValueError("the linear form must have a unit coefficient vector")
    support = [i for i in range(u.size) if abs(u[i]) > tol]
    out: Dict[HermiteKey, float] = {}
    fact_r = math.factorial(r)

    def rec(pos: int, remaining: int, key, weight: float, denom: int):
        if weight == 0.0:
            return
        if pos == len(support):
            if remaining == 0:
                c = math.sqrt(fact_r / denom) * weight
                if abs(c) > tol:
                    out[tuple(key)] = c
            return
        i = support[pos]
        for d in range(remaining + 1):
            rec(pos + 1, remaining - d,
                key + ([(i, d)] if d else []),
                weight * u[i] ** d, denom * math.factorial(d))

    rec(0, r, [], 1.0, 1)
    return out


# ---------------------------------------------------------------------------
# Gaussian and spherical monomial moments
# ---------------------------------------------------------------------------

def _double_factorial(k: int) -> int:
    out = 1
    while k > 1:
        out *= k
        k -= 2
    return out


def gaussian_monomial_moment(degs: Sequence[int]) -> int:
    """E[prod g_i^{d_i}] for iid standard normals: prod (d_i - 1)!!, or 0."""
    out = 1
    for d in degs:
        d = int(d)
        if d < 0:
            raise ValueError("negative degree")
        if d % 2:
            return 0
        out *= _double_factorial(d - 1)
    return out


def spherical_monomial_moment(degs: Sequence[int], n: int) -> Fraction:
    """E[prod x_i^{d_i}] over the uniform unit sphere in R^n, exactly.

    Derived from the Gaussian moment by factoring out the radial part:
    E[prod g^{d}] = E[r^{2k}] E[prod x^{d}] with E[r^{2k}] = n(n+2)...(n+2k-2).
    """
    total = sum(int(d) for d in degs)
    if total % 2:
        return Fraction(0)
    if any(int(d) % 2 for d in degs):
        return Fraction(0)
    k = total // 2
    num = gaussian_monomial_moment(degs)
    den = 1
    for j in range(k):
        den *= (n + 2 * j)
    return Fraction(num, den)


# ---------------------------------------------------------------------------
# named operations on expansions
# ---------------------------------------------------------------------------

def ou_smooth(f: HermiteExpansion, nu: float) -> HermiteExpansion:
    """Noise semigroup: scales the sigma coefficient by nu^(total degree)."""
    return f.ou(nu)


def gaussian_influence(f: AnyPolynomial, i: int) -> float:
    return f.influence(i)


def gaussian_variance(f: AnyPolynomial) -> float:
    return f.variance()


def multilinear_truncate(f: HermiteExpansion) -> MultilinearPolynomial:
    """Keep exactly the multi-indices with all degrees equal to one."""
    out: Dict[SubsetKey, float] = {}
    for k, c in f.coeffs.items():
        if all(d == 1 for _, d in k):
            out[tuple(v for v, _ in k)] = c
    return MultilinearPolynomial(f.n, out)


def correlated_inner(f: AnyPolynomial, g: AnyPolynomial, rho: float) -> float:
    """E f(x) g(y) over pairwise rho-correlated Gaussian inputs, exactly.

    Defined here for multilinear inputs only: sum_S fhat(S) ghat(S) rho^|S|.
    """
    if isinstance(f, HermiteExpansion):
        if not f.is_multilinear():
            raise ValueError("exact correlated inner product needs "
                             "multilinear inputs")
        f = multilinear_truncate(f)
    if isinstance(g, HermiteExpansion):
        if not g.is_multilinear():
            raise ValueError("exact correlated inner product needs "
                             "multilinear inputs")
        g = multilinear_truncate(g)
    if f.n != g.n:
        raise ValueError("variable counts differ")
    out = 0.0
    small, large = (f.coeffs, g.coeffs) if len(f.coeffs) <= len(g.coeffs) \
        else (g.coeffs, f.coeffs)
    for k, c in small.items():
        other = large.get(k)
        if other is not None:
            out += c * other * rho ** len(k)
    return float(out)


def hermite_correlated_inner(f: HermiteExpansion, g: HermiteExpansion,
                             rho: float) -> float:
    """E f(x) g(y) over rho-correlated Gaussians for general expansions:
    the Hermite basis is diagonal with eigenvalue rho^(total degree)."""
    if f.n != g.n:
        raise ValueError("variable counts differ")
    out = 0.0
    small, large = (f.coeffs, g.coeffs) if len(f.coeffs) <= len(g.coeffs) \
        else (g.coeffs, f.coeffs)
    for k, c in small.items():
        other = large.get(k)
        if other is not None:
            out += c * other * rho ** sum(d for _, d in k)
    return float(out)


# ---------------------------------------------------------------------------
# deterministic Gaussian sampling
# ---------------------------------------------------------------------------

class GaussianSampler:
    """Counter-based Gaussian stream: all draws are functions of
    (seed, stream, position), so chunked generation is reproducible."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)

    def substream(self, offset: int) -> "GaussianSampler":
        return GaussianSampler(self.seed, self.stream + int(offset))

    def _generator(self) -> np.random.Generator:
        return np.random.Generator(
            np.random.Philox(key=[self.seed % 2 ** 64, self.stream % 2 ** 64]))

    def chunks(self, n_vars: int, total: int):
        """Yield (k, n_vars) arrays of iid standard normals, k <= CHUNK."""
        gen = self._generator()
        done = 0
        while done < total:
            k = min(CHUNK, total - done)
            yield gen.standard_normal((k, n_vars))
            done += k

    def draw(self, n_vars: int, total: int) -> np.ndarray:
        return np.concatenate(list(self.chunks(n_vars, total)), axis=0)

    def correlated_chunks(self, n_vars: int, total: int, rho: float):
        """Yield (g, h) chunk pairs with per-coordinate correlation rho."""
        if not -1.0 <= rho <= 1.0:
            raise ValueError("correlation must lie in [-1, 1]")
        gen = self._generator()
        comp = math.sqrt(max(0.0, 1.0 - rho * rho))
        done = 0
        while done < total:
            k = min(CHUNK, total - done)
            block = gen.standard_normal((k, 2, n_vars))
            g = block[:, 0, :]
            h = rho * g + comp * block[:, 1, :]
            yield g, h
            done += k

    def downgraded_chunks(self, n_vars: int, total: int, rho: float, c: float):
        """Yield (g, h) pairs with correlation c built from two independent
        rho-correlated draws: h = (c/rho) h1 + sqrt(1 - c^2/rho^2) h2."""
        if rho <= 0.0:
            raise ValueError("base correlation must be positive")
        if not 0.0 <= c <= rho:
            raise ValueError("target correlation must lie in [0, rho]")
        gen = self._generator()
        mix = math.sqrt(max(0.0, 1.0 - (c / rho) ** 2))
        comp = math.sqrt(max(0.0, 1.0 - rho * rho))
        done = 0
        while done < total:
            k = min(CHUNK, total - done)
            block = gen.standard_normal((k, 4, n_vars))
            g = block[:, 0, :]
            h1 = rho * g + comp * block[:, 1, :]
            h2 = rho * block[:, 2, :] + comp * block[:, 3, :]
            yield g, (c / rho) * h1 + mix * h2
            done += k


def monte_carlo_functional(fn, sampler: GaussianSampler, n_vars: int,
                           n_samples: int, rho: Optional[float] = None) -> dict:
    """Empirical mean and standard error of a sample functional.

    `fn` receives one chunk (or a correlated chunk pair when `rho` is given)
    and returns one value per sample.  Chunks arrive in a fixed order, so the
    reduction is deterministic for a fixed sampler.
    """
    n_samples = int(n_samples)
    if n_samples < 1:
        raise ValueError("need at least one sample")
    total = 0.0
    total_sq = 0.0
    seen = 0
    source = (sampler.correlated_chunks(n_vars, n_samples, rho)
              if rho is not None else sampler.chunks(n_vars, n_samples))
    for chunk in source:
        vals = np.asarray(fn(*chunk) if isinstance(chunk, tuple) else fn(chunk),
                          dtype=float)
        total += float(np.sum(vals))
        total_sq += float(np.sum(vals * vals))
        seen += vals.size
    mean = total / seen
    var = max(total_sq / seen - mean * mean, 0.0)
    std_error = math.sqrt(var / seen)
    return {"mean": mean, "std_error": std_error, "n": seen}


# ---------------------------------------------------------------------------
# kernel layout for batch evaluation
# ---------------------------------------------------------------------------

def _as_hermite_items(poly: AnyPolynomial):
    if isinstance(poly, MultilinearPolynomial):
        return [(tuple((v, 1) for v in k), c) for k, c in poly.coeffs.items()]
    return list(poly.coeffs.items())


def _kernel_layout(polys: Sequence[AnyPolynomial], n_vars: int):
    term_vars, term_degs, term_offsets, term_poly, term_coeff = [], [], [0], [], []
    max_deg = 1
    for p_index, poly in enumerate(polys):
        for key, c in _as_hermite_items(poly):
            for v, d in key:
                term_vars.append(v)
                term_degs.append(d)
                max_deg = max(max_deg, d)
            term_offsets.append(len(term_vars))
            term_poly.append(p_index)
            term_coeff.append(c)
    return (np.array(term_vars, dtype=np.int64),
            np.array(term_degs, dtype=np.int64),
            np.array(term_offsets, dtype=np.int64),
            np.array(term_poly, dtype=np.int64),
            np.array(term_coeff, dtype=float),
            len(polys), n_vars, max_deg)


def _evaluate_layout(layout, batch: np.ndarray) -> np.ndarray:
    (term_vars, term_degs, term_offsets, term_poly, term_coeff,
     n_polys, n_vars, max_deg) = layout
    herm = _kernels.hermite_value_table(batch, max_deg)
    return _kernels.eval_poly_batch(herm, term_vars, term_degs, term_offsets,
                                    term_poly, term_coeff, n_polys)


# ---------------------------------------------------------------------------
# operator-valued random objects
# ---------------------------------------------------------------------------

class RandomOperator:
    """Operator-valued polynomial: sum_sigma p_sigma(g) B_sigma, where sigma
    ranges over multi-indices of the standard basis on `n_systems` factors of
    dimension `dim`, and each p_sigma is a polynomial in n Gaussian inputs."""

    def __init__(self, n_systems: int, dim: int, n_vars: int,
                 coeffs: Mapping[Sequence[int], AnyPolynomial],
                 basis: Optional[oc.HermitianBasis] = None):
        self.n_systems = int(n_systems)
        self.dim = int(dim)
        self.n_vars = int(n_vars)
        self.basis = basis if basis is not None else oc.make_standard_basis(self.dim)
        if self.basis.dim != self.dim:
            raise ValueError("basis dimension mismatch")
        table: Dict[Tuple[int, ...], AnyPolynomial] = {}
        k = self.dim * self.dim
        for key, poly in coeffs.items():
            key = tuple(int(i) for i in key)
            if len(key) != self.n_systems or any(not 0 <= i < k for i in key):
                raise ValueError("bad operator multi-index %r" % (key,))
            if poly.n != self.n_vars:
                raise ValueError("coefficient polynomial has %d variables, "
                                 "expected %d" % (poly.n, self.n_vars))
            table[key] = poly
        self.coeffs = table
        self._layout = None
        self._stack = None

    @property
    def total_dim(self) -> int:
        return self.dim ** self.n_systems

    def operator_weight(self, key: Tuple[int, ...]) -> int:
        return sum(1 for i in key if i != 0)

    def degree(self) -> int:
        """Largest coefficient-polynomial degree."""
        return max((p.degree() for p in self.coeffs.values()), default=0)

    def l2_sq_exact(self) -> float:
        """E of the squared normalized 2-norm, exactly from coefficients."""
        return float(sum(p.two_norm_sq() for p in self.coeffs.values()))

    def _prepared(self):
        if self._layout is None:
            keys = sorted(self.coeffs)
            polys = [self.coeffs[k] for k in keys]
            self._layout = _kernel_layout(polys, self.n_vars)
            stack = np.empty((len(keys), self.total_dim, self.total_dim),
                             dtype=complex)
            for idx, key in enumerate(keys):
                acc = np.array([[1.0 + 0j]])
                for i in key:
                    acc = np.kron(acc, self.basis.elements[i])
                stack[idx] = acc
            self._stack = stack
        return self._layout, self._stack

    def sample_batch(self, batch: np.ndarray) -> np.ndarray:
        """Dense realizations, shape (N, total_dim, total_dim)."""
        batch = np.asarray(batch, dtype=float)
        if batch.ndim != 2 or batch.shape[1] != self.n_vars:
            raise ValueError("batch must have shape (N, %d)" % self.n_vars)
        layout, stack = self._prepared()
        vals = _evaluate_layout(layout, batch)
        return np.tensordot(vals, stack, axes=(1, 0))

    def sample(self, g: np.ndarray) -> np.ndarray:
        return self.sample_batch(np.asarray(g, dtype=float)[None, :])[0]


class JointRandomOperatorPair:
    """Two random operators read off correlated Gaussian inputs (g, h)."""

    def __init__(self, op_m: RandomOperator, op_n: RandomOperator, rho: float):
        if op_m.n_vars != op_n.n_vars:
            raise ValueError("operands read different numbers of variables")
        if not 0.0 <= rho <= 1.0:
            raise ValueError("correlation must lie in [0, 1]")
        self.op_m = op_m
        self.op_n = op_n
        self.rho = rho

    def exact_correlated_trace(self) -> float:
        """E <M(g), N(h)> under the normalized inner product, exactly.

        Requires the two operators to share dimensions and basis; reduces to
        the per-multi-index correlated inner products of the coefficients.
        """
        if (self.op_m.dim != self.op_n.dim
                or self.op_m.n_systems != self.op_n.n_systems):
            raise ValueError("operator sides differ")
        if self.op_m.basis is not self.op_n.basis and np.max(np.abs(
                self.op_m.basis.elements - self.op_n.basis.elements)) > 1e-12:
            raise ValueError("operator bases differ")
        out = 0.0
        for key, p in self.op_m.coeffs.items():
            q = self.op_n.coeffs.get(key)
            if q is None:
                continue
            ph = p.to_hermite() if isinstance(p, MultilinearPolynomial) else p
            qh = q.to_hermite() if isinstance(q, MultilinearPolynomial) else q
            out += hermite_correlated_inner(ph, qh, self.rho)
        return float(out)


def random_operator_moments(op: RandomOperator, sampler: GaussianSampler,
                            n_samples: int = 100000) -> dict:
    """Exact squared-2-norm expectation plus a Monte Carlo fourth moment."""
    dim = op.total_dim

    def fourth(batch):
        mats = op.sample_batch(batch)
        sq = np.einsum("nij,njk->nik", mats, mats)
        return np.einsum("nij,nij->n", sq, sq.conj()).real / dim

    mc = monte_carlo_functional(fourth, sampler, op.n_vars, n_samples)
    return {"l2_sq_exact": op.l2_sq_exact(), "p4_monte_carlo": mc}


def random_operator_zeta(op: RandomOperator, sampler: GaussianSampler,
                         n_samples: int) -> dict:
    """Monte Carlo E Tr zeta(P): summed squares of negative eigenvalues."""
    if n_samples < 100:
        raise ValueError("zeta estimation needs at least 100 samples")

    def zeta(batch):
        mats = op.sample_batch(batch)
        vals = np.linalg.eigvalsh(mats)
        neg = np.minimum(vals, 0.0)
        return np.sum(neg * neg, axis=1)

    return monte_carlo_functional(zeta, sampler, op.n_vars, n_samples)
