"""Tests for the eight-stage compression pipeline and its parameter chain."""

import json
import math
from fractions import Fraction

import numpy as np
import pytest

from mesc import compression_pipeline as cp
from mesc import gaussian_analysis as ga
from mesc import operator_core as oc
from mesc import states
from mesc import superop

rng = np.random.default_rng(20260816)

# trivial questions (p = q = r = 1), qubit source and qubit answers
QDIMS = cp.GameDims(1, 1, 1, 2, 2, 2, 2)
SCALAR_IN = np.array([[1.0]])


def qubit_setup(eps=0.25, delta=0.3, theta=0.2, seed=5, mc=2000,
                overrides=None, retry_cap=8):
    """Profile + params + context for the workhorse qubit configuration."""
    profile = states.depolarized_mes(2, eps)
    params = cp.compute_bound(delta, theta, profile.rho, QDIMS, seed=seed,
                              monte_carlo_N=mc, overrides=overrides)
    ctx = cp.make_context(SCALAR_IN, profile, params, retry_cap=retry_cap)
    return profile, params, ctx


def random_strategy_choi(n_copies, seed, dims=QDIMS):
    gen = np.random.default_rng(seed)
    phi = superop.random_cptp((dims.s,) * n_copies + (dims.p,), (dims.a,),
                              gen)
    return phi.choi_adjoint


# ---------------------------------------------------------------------------
# oracle: correlation of answers by direct channel application to the shared
# state, independent of the Fourier-slice pairing formula under test
# ---------------------------------------------------------------------------

def adjoint_apply(phi, x):
    """Phi^*(x) from the defining identity Tr[Phi^*(X)^dag Y] = Tr[X^dag Phi(Y)]."""
    din, dout = phi.din, phi.dout
    t = np.zeros((dout * dout, din * din), dtype=complex)
    for k in range(din * din):
        unit = np.zeros((din, din), dtype=complex)
        unit[k // din, k % din] = 1.0
        t[:, k] = phi.apply(unit).reshape(-1)
    vec = t.conj().T @ np.asarray(x, dtype=complex).reshape(-1)
    return vec.reshape(din, din)


def dense_corr_oracle(alice, bob, profile, phi_in, dims, n):
    s, t, p, q, r = dims.s, dims.t, dims.p, dims.q, dims.r
    joint = np.array([[1.0 + 0j]])
    for _ in range(n):
        joint = np.kron(joint, profile.psi)
    # interleaved copy pairs (S_i, T_i) -> S^n then T^n
    perm = list(range(0, 2 * n, 2)) + list(range(1, 2 * n, 2))
    joint = oc.permute_systems(joint, [s, t] * n, perm)
    full = np.kron(joint, np.asarray(phi_in, dtype=complex))
    # [S^n, T^n, P, Q, R] -> [S^n, P, T^n, Q, R]
    perm2 = (list(range(n)) + [2 * n] + list(range(n, 2 * n))
             + [2 * n + 1, 2 * n + 2])
    full = oc.permute_systems(full, [s] * n + [t] * n + [p, q, r], perm2)

    ba = oc.make_standard_basis(dims.a)
    bb = oc.make_standard_basis(dims.b)
    br = oc.make_standard_basis(r)
    ms = [adjoint_apply(alice, e / math.sqrt(dims.a)) for e in ba.elements]
    ns = [adjoint_apply(bob, e / math.sqrt(dims.b)) for e in bb.elements]
    table = np.zeros((dims.a ** 2, dims.b ** 2, r ** 2))
    for ia, am in enumerate(ms):
        for ib, bm in enumerate(ns):
            for ir in range(r ** 2):
                op = oc.kron_all([am, bm, br.elements[ir] / math.sqrt(r)])
                table[ia, ib, ir] = np.trace(op @ full).real
    return table


# ---------------------------------------------------------------------------
# parameter chain
# ---------------------------------------------------------------------------

def test_smoothing_degree_formula_example():
    dims = cp.GameDims(2, 2, 1, 2, 2, 2, 2)
    assert cp.smoothing_degree(0.1, 0.5, dims) == 1280


def test_smoothing_gamma_matches_direct_formula():
    dims = cp.GameDims(2, 2, 1, 2, 2, 2, 2)
    delta, rho = 0.1, 0.5
    dp = delta / (4.0 * dims.a ** 2 * dims.b ** 2 * dims.p * dims.q)
    expect = (1.0 - dp) ** (math.log(rho) / (math.log(dp) + math.log(rho)))
    got = cp.smoothing_gamma(delta, rho, dims)
    assert math.isclose(got, expect, rel_tol=1e-14)
    assert 0.0 < got < 1.0
    # the defining property: depolarizing by gamma kills at most dp of the
    # correlation mass at every degree simultaneously
    for dl, rh in [(0.1, 0.5), (0.25, 0.75), (0.4, 0.99), (0.9, 0.9),
                   (0.05, 0.3), (0.3, 1e-4)]:
        g = cp.smoothing_gamma(dl, rh, dims)
        dpl = dl / (4.0 * dims.a ** 2 * dims.b ** 2 * dims.p * dims.q)
        worst = max(rh ** d * (1.0 - g ** (2 * d)) for d in range(1, 2000))
        assert worst <= dpl * (1.0 + 1e-12)
    # halving the constant halves the depolarization
    softer = cp.smoothing_gamma(delta, rho, dims,
                                cp.PipelineConstants(c_smooth=0.5))
    assert math.isclose(1.0 - softer, 0.5 * (1.0 - got), rel_tol=1e-9)


def test_gaussian_degree_formula_example():
    # same closed form as the operator-side cut: 1280 at these inputs
    dims = cp.GameDims(2, 2, 1, 2, 2, 2, 2)
    params = cp.compute_bound(0.1, 0.25, 0.5, dims)
    assert params.d2 == 1280
    assert params.d1 == 1280


def test_compute_bound_toy_chain_exact():
    # delta = theta = 0.25, rho = 0.5, every dimension 2: all chain quotients
    # are dyadic, so the whole chain is computable exactly by hand
    dims = cp.GameDims(2, 2, 2, 2, 2, 2, 2)
    params = cp.compute_bound(0.25, 0.25, 0.5, dims)
    d1 = Fraction(4 * 4 * 2 * 2) / (Fraction(1, 4) * Fraction(1, 2))
    assert d1 == 512 and params.d1 == 512
    assert params.h_cap == math.ceil(512 * 4 / 0.25) == 8192
    # n0 = 2^16 * 512^512 * 16384^6 = 2^4708 (delta_dr = 2^-14)
    assert params.n0 == 2 ** 4708
    assert params.n1 == 2 ** 34
    assert params.total_copies == 8192 + 2 ** 4742
    assert params.recomputed_consistent()


def test_compute_bound_deterministic_serialization():
    dims = cp.GameDims(2, 2, 2, 2, 2, 2, 2)
    a = cp.compute_bound(0.25, 0.25, 0.5, dims)
    b = cp.compute_bound(0.25, 0.25, 0.5, dims)
    ja = json.dumps(a.to_json_dict(), sort_keys=True)
    jb = json.dumps(b.to_json_dict(), sort_keys=True)
    assert ja == jb
    assert "d1" in a.symbolic_chain()


def test_compute_bound_product_source_boundary():
    params = cp.compute_bound(0.25, 0.25, 0.0, QDIMS)
    assert 0.0 < params.gamma < 1.0
    assert params.total_copies == params.h_cap + params.n0 * params.n1


def test_compute_bound_perfect_correlation_rejected():
    with pytest.raises(ValueError):
        cp.compute_bound(0.25, 0.25, 1.0, QDIMS)


def test_preset_parameters_formula():
    dims = cp.GameDims(2, 2, 1, 2, 2, 2, 2)
    eps, rho = 0.3, 0.5
    delta, theta, log_theta = cp.preset_parameters(eps, rho, dims)
    assert delta == eps
    expo = (dims.a ** 2 * dims.b ** 2 * dims.p * dims.q
            * math.log(2) * math.log(2) / (eps * (1.0 - rho)))
    assert math.isclose(theta, eps ** 12 * math.exp(-expo), rel_tol=1e-12)
    assert math.isclose(log_theta, 12 * math.log(eps) - expo, rel_tol=1e-12)


def test_preset_parameters_demo_scale():
    # the qubit demo configuration: the cut lands around 2.3e-61
    delta, theta, _ = cp.preset_parameters(0.25, 0.75, QDIMS)
    assert delta == 0.25
    expect = 0.25 ** 12 * math.exp(-16 * math.log(2) ** 2 / (0.25 * 0.25))
    assert math.isclose(theta, expect, rel_tol=1e-12)
    assert 1e-61 < theta < 1e-60


def test_params_overrides_and_validation():
    params = cp.compute_bound(0.3, 0.2, 0.75, QDIMS,
                              overrides={"d1": 4, "n0": 16, "d2": 4,
                                         "n1": 2, "D": 6})
    assert params.desk_scale
    assert params.effective_d1 == 4
    assert params.effective_n0 == 16
    assert params.effective_total_copies == 6
    with pytest.raises(ValueError):
        cp.compute_bound(0.3, 0.2, 0.75, QDIMS, overrides={"bogus": 3})
    with pytest.raises(ValueError):
        cp.GameDims(0, 1, 1, 2, 2, 2, 2)


def test_params_from_config_roundtrip():
    config = {"delta": 0.3, "theta": 0.2, "seed": 9, "monte_carlo_N": 500,
              "overrides": {"d1": 4}, "constants": {"c_d1": 2.0}}
    params = cp.params_from_config(config, QDIMS, 0.75)
    direct = cp.compute_bound(0.3, 0.2, 0.75, QDIMS,
                              cp.PipelineConstants(c_d1=2.0), seed=9,
                              monte_carlo_N=500, overrides={"d1": 4})
    assert params.d1 == direct.d1
    assert params.seed == 9 and params.monte_carlo_N == 500
    assert params.effective_d1 == 4


# ---------------------------------------------------------------------------
# Fourier slices of a Choi matrix
# ---------------------------------------------------------------------------

def test_fourier_slices_roundtrip_and_parseval():
    choi = random_strategy_choi(2, seed=11)
    profile, params, ctx = qubit_setup()
    sl = cp.FourierSlices.from_choi(choi, 2, ctx.basis_s, ctx.basis_p,
                                    ctx.basis_a)
    back = sl.to_choi(ctx.basis_s, ctx.basis_p, ctx.basis_a)
    assert np.max(np.abs(back.matrix - choi.matrix)) < 1e-12
    # Parseval in the normalized norm
    dense = oc.normalized_p_norm(choi.matrix, 2) ** 2
    assert math.isclose(sl.total_norm_sq(), dense, rel_tol=1e-12)
    # slice bookkeeping: squared per-answer norms sum to dim(a) x total
    per_a = sl.a_slice_norms()
    assert math.isclose(float(np.sum(per_a ** 2)) / 2.0, sl.total_norm_sq(),
                        rel_tol=1e-12)


def test_fourier_slices_influences_and_degree():
    choi = random_strategy_choi(2, seed=12)
    profile, params, ctx = qubit_setup()
    sl = cp.FourierSlices.from_choi(choi, 2, ctx.basis_s, ctx.basis_p,
                                    ctx.basis_a)
    # recompute influences by brute accumulation over the coefficient dict
    scale = 1.0 / (sl.p_dim * sl.a_dim)
    want = np.zeros(2)
    deg = 0
    for (p, a), block in sl.coeffs.items():
        for sig, c in block.items():
            deg = max(deg, sum(1 for x in sig if x != 0))
            for i, x in enumerate(sig):
                if x != 0:
                    want[i] += scale * c * c
    assert np.allclose(sl.influences(), want, atol=1e-13)
    assert sl.degree() == deg


def test_fourier_slices_depolarize_matches_dense():
    choi = random_strategy_choi(2, seed=13)
    profile, params, ctx = qubit_setup()
    sl = cp.FourierSlices.from_choi(choi, 2, ctx.basis_s, ctx.basis_p,
                                    ctx.basis_a)
    dims = [2, 2, 1, 2]
    for gamma in (0.0, 0.3, 1.0):
        dense = oc.depolarize(choi.matrix, dims, gamma, targets=[0, 1])
        back = sl.depolarize(gamma).to_choi(ctx.basis_s, ctx.basis_p,
                                            ctx.basis_a)
        assert np.max(np.abs(back.matrix - dense)) < 1e-12
    # gamma = 1 is the exact no-op limit
    same = sl.depolarize(1.0)
    for key, block in sl.coeffs.items():
        for sig, c in block.items():
            assert same.coeffs[key][sig] == pytest.approx(c, abs=0.0)


def test_fourier_slices_truncate_bookkeeping():
    choi = random_strategy_choi(2, seed=14)
    profile, params, ctx = qubit_setup()
    sl = cp.FourierSlices.from_choi(choi, 2, ctx.basis_s, ctx.basis_p,
                                    ctx.basis_a)
    kept, dropped = sl.truncate(1)
    assert kept.degree() <= 1
    assert math.isclose(sl.total_norm_sq(),
                        kept.total_norm_sq() + dropped, rel_tol=1e-12)
    # a cut at (or above) the current degree is the exact no-op limit
    whole, none = sl.truncate(sl.degree())
    assert none == 0.0
    assert whole.total_norm_sq() == pytest.approx(sl.total_norm_sq(),
                                                  rel=1e-14)


def test_fourier_slices_identity_slice_and_positivity_frame():
    choi = random_strategy_choi(2, seed=15)
    profile, params, ctx = qubit_setup()
    sl = cp.FourierSlices.from_choi(choi, 2, ctx.basis_s, ctx.basis_p,
                                    ctx.basis_a)
    assert sl.identity_slice_residual() < 1e-10
    frame = sl.cp_frame_matrix(ctx.basis_s, ctx.basis_p, ctx.basis_a)
    assert np.min(np.linalg.eigvalsh(frame)) > -1e-10
    # knocking the invariant coefficient off its value shows up as residual
    bad = {k: dict(v) for k, v in sl.coeffs.items()}
    bad[(0, 0)][(0, 0)] += 0.05
    sl2 = cp.FourierSlices(2, 2, 1, 2, bad)
    assert sl2.identity_slice_residual() > 0.04


# ---------------------------------------------------------------------------
# correlation tables against the dense oracle
# ---------------------------------------------------------------------------

def test_correlation_table_matches_dense_oracle_trivial_questions():
    profile, params, ctx = qubit_setup(eps=0.25)
    gen = np.random.default_rng(21)
    alice = superop.random_cptp((2, 2, 1), (2,), gen)
    bob = superop.random_cptp((2, 2, 1), (2,), gen)
    m = cp.FourierSlices.from_choi(alice.choi_adjoint, 2, ctx.basis_s,
                                   ctx.basis_p, ctx.basis_a)
    n = cp.FourierSlices.from_choi(bob.choi_adjoint, 2, ctx.basis_t,
                                   ctx.basis_q, ctx.basis_b)
    table = cp.correlation_table(m, n, ctx)
    oracle = dense_corr_oracle(alice, bob, profile, SCALAR_IN, QDIMS, 2)
    assert np.max(np.abs(table - oracle)) < 1e-10


def test_correlation_table_matches_dense_oracle_with_questions():
    dims = cp.GameDims(2, 2, 1, 2, 2, 2, 2)
    profile = states.depolarized_mes(2, 0.5)
    # classically correlated uniform questions
    phi_in = np.diag([0.5, 0.0, 0.0, 0.5]).astype(complex)
    params = cp.compute_bound(0.3, 0.2, profile.rho, dims, seed=3,
                              monte_carlo_N=0)
    ctx = cp.make_context(phi_in, profile, params)
    gen = np.random.default_rng(22)
    alice = superop.random_cptp((2, 2), (2,), gen)
    bob = superop.random_cptp((2, 2), (2,), gen)
    m = cp.FourierSlices.from_choi(alice.choi_adjoint, 1, ctx.basis_s,
                                   ctx.basis_p, ctx.basis_a)
    n = cp.FourierSlices.from_choi(bob.choi_adjoint, 1, ctx.basis_t,
                                   ctx.basis_q, ctx.basis_b)
    table = cp.correlation_table(m, n, ctx)
    oracle = dense_corr_oracle(alice, bob, profile, phi_in, dims, 1)
    assert np.max(np.abs(table - oracle)) < 1e-10


def test_correlation_table_matches_dense_oracle_with_referee():
    dims = cp.GameDims(2, 2, 2, 2, 2, 2, 2)
    profile = states.depolarized_mes(2, 0.25)
    # three-way classical correlation so the referee register matters
    phi_in = np.zeros((8, 8), dtype=complex)
    phi_in[0, 0] = 0.5
    phi_in[7, 7] = 0.5
    params = cp.compute_bound(0.3, 0.2, profile.rho, dims, seed=3,
                              monte_carlo_N=0)
    ctx = cp.make_context(phi_in, profile, params)
    gen = np.random.default_rng(23)
    alice = superop.random_cptp((2, 2), (2,), gen)
    bob = superop.random_cptp((2, 2), (2,), gen)
    m = cp.FourierSlices.from_choi(alice.choi_adjoint, 1, ctx.basis_s,
                                   ctx.basis_p, ctx.basis_a)
    n = cp.FourierSlices.from_choi(bob.choi_adjoint, 1, ctx.basis_t,
                                   ctx.basis_q, ctx.basis_b)
    table = cp.correlation_table(m, n, ctx)
    oracle = dense_corr_oracle(alice, bob, profile, phi_in, dims, 1)
    assert np.max(np.abs(table - oracle)) < 1e-10


# ---------------------------------------------------------------------------
# stage 1: smoothing
# ---------------------------------------------------------------------------

def test_step_smooth_random_strategy_bounds():
    profile, params, ctx = qubit_setup(delta=0.2, overrides={"d1": 4})
    m = random_strategy_choi(2, seed=31)
    n = random_strategy_choi(2, seed=32)
    m1, n1, d1, rep = cp.step_smooth(m, n, 0.2, profile, ctx=ctx)
    assert d1 == 4
    assert rep.passed, [c for c in rep.checks if not c.passed]
    assert rep.corr_dev_max <= 0.2 + 1e-12
    assert m1.identity_slice_residual() < 1e-10
    assert float(np.max(m1.a_slice_norms())) <= 1.0 + 1e-9
    # the smoothing and cutoff halves add up to the recorded deviation bound
    assert rep.data["smoothing_deviation"] <= 0.1 + 1e-12
    assert rep.data["cutoff_deviation"] <= 0.1 + 1e-12


def test_step_smooth_rejects_invalid_channel():
    profile, params, ctx = qubit_setup()
    m = random_strategy_choi(2, seed=33)
    bad = superop.ChoiMatrix(m.matrix * 1.2, m.out_dims, m.in_dims)
    with pytest.raises(ValueError):
        cp.step_smooth(bad, m, 0.2, profile, ctx=ctx)


# ---------------------------------------------------------------------------
# stage 2: regularization
# ---------------------------------------------------------------------------

def _hand_slices(extra, n_copies=2, p_dim=1, a_dim=2):
    """Sliced operator with the mandatory identity content plus `extra`
    (a dict {(p, a): {sigma: coeff}})."""
    coeffs = {(0, 0): {(0,) * n_copies: math.sqrt(p_dim / a_dim)}}
    for key, block in extra.items():
        coeffs.setdefault(key, {}).update(block)
    return cp.FourierSlices(n_copies, 2, p_dim, a_dim, coeffs)


def test_step_regularize_single_heavy_coordinate():
    m1 = _hand_slices({(0, 3): {(3, 0): 0.5}})
    n1 = _hand_slices({})
    high, rep = cp.step_regularize(m1, n1, 0.05, 2)
    assert high == (0,)
    assert rep.passed
    assert rep.data["max_free_influence"] <= 0.05


def test_step_regularize_identity_only_and_cardinality():
    m1 = _hand_slices({})
    n1 = _hand_slices({})
    high, rep = cp.step_regularize(m1, n1, 0.1, 2)
    assert high == ()
    assert rep.passed
    # cardinality bound on a random instance
    profile, params, ctx = qubit_setup(overrides={"d1": 4})
    m = random_strategy_choi(2, seed=34)
    n = random_strategy_choi(2, seed=35)
    m2, n2, d1, _ = cp.step_smooth(m, n, 0.3, profile, ctx=ctx)
    high2, rep2 = cp.step_regularize(m2, n2, 0.01, d1)
    assert len(high2) <= d1 * (2 ** 2 + 2 ** 2) / 0.01
    assert rep2.passed


# ---------------------------------------------------------------------------
# stage 3: invariance (operators -> random operators)
# ---------------------------------------------------------------------------

def test_step_invariance_all_high_is_identity_map():
    profile, params, ctx = qubit_setup(mc=0, overrides={"d1": 4})
    m = random_strategy_choi(2, seed=36)
    n = random_strategy_choi(2, seed=37)
    m1, n1, d1, _ = cp.step_smooth(m, n, 0.3, profile, ctx=ctx)
    pair, rep = cp.step_invariance(m1, n1, (0, 1), profile, ctx=ctx)
    assert pair.n_vars == 0
    assert rep.passed
    # coefficient polynomials are constants matching the slice coefficients
    for (p, a, sig), poly in pair.m_coeffs.items():
        assert poly.degree() == 0
        assert poly.two_norm_sq() == pytest.approx(
            m1.coeffs[(p, a)][sig] ** 2, rel=1e-12)
    # and Monte Carlo was skipped
    assert any("skipped" in note for note in rep.notes)


def test_step_invariance_exact_norms_and_correlations():
    profile, params, ctx = qubit_setup(mc=1500, overrides={"d1": 4})
    m = random_strategy_choi(2, seed=38)
    n = random_strategy_choi(2, seed=39)
    m1, n1, d1, _ = cp.step_smooth(m, n, 0.3, profile, ctx=ctx)
    pair, rep = cp.step_invariance(m1, n1, (), profile, ctx=ctx)
    # two copies, each free coordinate spends 3 levels x 2 draw channels
    assert pair.n_vars == 2 * (2 ** 2 - 1) * 2
    assert rep.passed, [c for c in rep.checks if not c.passed]
    # slice-norm ledger matches the operator side slice by slice
    exact = pair.exact_slice_l2("m")
    for (p, a), val in exact.items():
        assert val == pytest.approx(m1.slice_norm_sq(p, a), abs=1e-12)
    table_ops = cp.correlation_table(m1, n1, ctx)
    table_pair = pair.exact_corr_table(ctx)
    assert np.max(np.abs(table_ops - table_pair)) < 1e-10


# ---------------------------------------------------------------------------
# stage 4: dimension reduction
# ---------------------------------------------------------------------------

def _toy_pair(m_polys, n_polys, n_vars, rho, dims=QDIMS):
    """Pair with the identity slices plus the given {(p,a,sig): poly}."""
    const = math.sqrt(dims.p / dims.a)
    m = {(0, 0, ()): ga.MultilinearPolynomial(n_vars, {(): const})}
    n = {(0, 0, ()): ga.MultilinearPolynomial(n_vars, {(): const})}
    m.update(m_polys)
    n.update(n_polys)
    return cp.RandomChoiPair(m, n, n_vars, rho, (), dims)


def test_step_dimension_reduce_constant_pair_unchanged():
    profile, params, ctx = qubit_setup(mc=1000)
    pair = _toy_pair({}, {}, 0, profile.rho)
    sphere, rep, retries = cp.step_dimension_reduce(pair, 0.1, seed=1,
                                                    ctx=ctx)
    assert retries == 0
    assert rep.passed
    assert sphere.n0 == 1 and sphere.base.n_vars == 0
    assert rep.corr_dev_max == pytest.approx(0.0, abs=1e-14)


def test_step_dimension_reduce_degree_one_sphere_oracle():
    profile, params, ctx = qubit_setup(mc=2000, overrides={"n0": 8})
    lin = ga.MultilinearPolynomial(1, {(0,): 0.5})
    pair = _toy_pair({(0, 3, ()): lin}, {(0, 3, ()): lin}, 1, profile.rho)
    sphere, rep, retries = cp.step_dimension_reduce(pair, 0.5, seed=2,
                                                    ctx=ctx)
    assert rep.passed, [c for c in rep.checks if not c.passed]
    assert sphere.n0 == 8
    # sphere symmetry: E (g . u)^2 over the unit sphere is |g|^2 / n0
    g0 = sphere.g[0]
    want = 0.25 * float(g0 @ g0) / 8.0
    got = sphere.sphere_slice_l2("m")[(0, 3)]
    assert got == pytest.approx(want, rel=1e-12)


def test_step_dimension_reduce_retry_exhaustion():
    profile, params, ctx = qubit_setup(mc=500, overrides={"n0": 8},
                                       retry_cap=2)
    lin = ga.MultilinearPolynomial(1, {(0,): 0.5})
    pair = _toy_pair({(0, 3, ()): lin}, {(0, 3, ()): lin}, 1, profile.rho)
    # an impossible tolerance: the norm-inflation bound 1 + delta becomes 0
    with pytest.raises(cp.StageFailure) as err:
        cp.step_dimension_reduce(pair, -1.0, seed=2, ctx=ctx)
    assert len(err.value.reports) == 2
    assert all(not r.passed for r in err.value.reports)


# ---------------------------------------------------------------------------
# stage 5: Gaussian noise + Hermite truncation
# ---------------------------------------------------------------------------

def test_ou_scaling_cubed():
    nu = 0.7
    h3 = ga.HermiteExpansion(1, {(((0, 3)),): 1.0})
    out = h3.ou(nu)
    assert out.coeffs[((0, 3),)] == pytest.approx(nu ** 3, rel=1e-14)


def test_step_smooth_random_nu_and_truncation():
    profile, params, ctx = qubit_setup(
        delta=0.3, theta=0.2, mc=1500,
        overrides={"d1": 4, "n0": 2, "d2": 4, "n1": 1, "D": 2})
    lin = ga.MultilinearPolynomial(2, {(0,): 0.4, (1,): 0.2})
    pair = _toy_pair({(0, 3, ()): lin}, {(0, 3, ()): lin}, 2, profile.rho)
    sphere = cp.SphereFormPair(pair, np.eye(2))
    out, rep = cp.step_smooth_random(sphere, 0.3, profile.rho, ctx=ctx)
    assert rep.passed, [c for c in rep.checks if not c.passed]
    # the noise rate matches its closed form
    dpp = 0.3 / (16.0 * 2 ** 2 * 2 ** 2 * 1 * 1)
    nu = (1.0 - dpp) ** (math.log(profile.rho)
                         / (math.log(dpp) + math.log(profile.rho)))
    assert rep.data["nu"] == pytest.approx(nu, rel=1e-12)
    assert rep.data["d2"] == 4
    assert rep.data["v_star"] == 2
    for poly in out.m_coeffs.values():
        assert poly.degree() <= 4


def test_step_smooth_random_degree_cut():
    profile, params, ctx = qubit_setup(
        delta=0.3, theta=0.2, mc=0,
        overrides={"d1": 4, "n0": 2, "d2": 2, "n1": 1, "D": 2})
    lin = ga.MultilinearPolynomial(2, {(0,): 0.4, (1,): 0.2})
    pair = _toy_pair({(0, 3, ()): lin}, {(0, 3, ()): lin}, 2, profile.rho)
    sphere = cp.SphereFormPair(pair, np.eye(2))
    out, rep = cp.step_smooth_random(sphere, 0.3, profile.rho, ctx=ctx)
    for poly in out.m_coeffs.values():
        assert poly.degree() <= 2
    # norms may only shrink under noise + truncation
    in_norm = sum(p.two_norm_sq() for p in pair.m_coeffs.values())
    out_norm = sum(p.two_norm_sq() for p in out.m_coeffs.values())
    assert out_norm <= in_norm + 1e-12


# ---------------------------------------------------------------------------
# stage 6: multilinearization
# ---------------------------------------------------------------------------

def test_step_multilinearize_square_drops_two_over_n1():
    profile, params, ctx = qubit_setup(
        mc=0, overrides={"d1": 4, "n0": 1, "d2": 2, "n1": 8, "D": 9})
    sq = ga.HermiteExpansion(1, {(): 1.0, ((0, 2),): math.sqrt(2.0)})
    const = math.sqrt(1 / 2)
    m = {(0, 0, ()): ga.HermiteExpansion(1, {(): const}),
         (0, 3, ()): sq}
    n = {(0, 0, ()): ga.HermiteExpansion(1, {(): const}),
         (0, 3, ()): sq}
    pair = cp.RandomChoiPair(m, n, 1, profile.rho, (), QDIMS)
    out, rep = cp.step_multilinearize(pair, 2, 0.5, ctx=ctx)
    assert rep.norms["max_dropped_mass"] == pytest.approx(2.0 / 8.0,
                                                          abs=1e-12)
    poly = out.m_coeffs[(0, 3, ())]
    pair_keys = [k for k in poly.coeffs if len(k) == 2]
    assert len(pair_keys) == math.comb(8, 2)
    for k in pair_keys:
        assert poly.coeffs[k] == pytest.approx(2.0 / 8.0, rel=1e-12)
    assert rep.passed, [c for c in rep.checks if not c.passed]


def test_step_multilinearize_degree_one_even_split():
    profile, params, ctx = qubit_setup(
        mc=0, overrides={"d1": 4, "n0": 1, "d2": 2, "n1": 4, "D": 5})
    lin = ga.HermiteExpansion(1, {((0, 1),): 0.6})
    const = math.sqrt(1 / 2)
    m = {(0, 0, ()): ga.HermiteExpansion(1, {(): const}), (0, 3, ()): lin}
    pair = cp.RandomChoiPair(m, dict(m), 1, profile.rho, (), QDIMS)
    out, rep = cp.step_multilinearize(pair, 1, 0.5, ctx=ctx)
    poly = out.m_coeffs[(0, 3, ())]
    singles = [k for k in poly.coeffs if len(k) == 1]
    assert len(singles) == 4
    for k in singles:
        assert poly.coeffs[k] == pytest.approx(0.6 / 2.0, rel=1e-12)
    assert rep.norms["max_dropped_mass"] == pytest.approx(0.0, abs=1e-12)
    assert poly.two_norm_sq() == pytest.approx(0.36, rel=1e-12)
    # each splinter carries exactly a 1/n1 share here, under the d/n1 cap
    assert rep.data["splitting_factor"] == pytest.approx(1.0 / 4.0)


# ---------------------------------------------------------------------------
# stage 7: invariance back (random operators -> operators)
# ---------------------------------------------------------------------------

def test_step_invariance_back_linear_pair_example():
    profile, params, ctx = qubit_setup(mc=0)
    lin = ga.MultilinearPolynomial(1, {(0,): 1.0})
    pair = _toy_pair({(0, 3, ()): lin}, {(0, 3, ()): lin}, 1, profile.rho)
    before = pair.exact_corr_table(ctx)
    m_choi, n_choi, rep = cp.step_invariance_back(pair, profile, ctx=ctx)
    assert rep.passed, [c for c in rep.checks if not c.passed]
    assert rep.data["n_out"] == 1
    m_sl = cp.FourierSlices.from_choi(m_choi, 1, ctx.basis_s, ctx.basis_p,
                                      ctx.basis_a)
    n_sl = cp.FourierSlices.from_choi(n_choi, 1, ctx.basis_t, ctx.basis_q,
                                      ctx.basis_b)
    after = cp.correlation_table(m_sl, n_sl, ctx)
    assert np.max(np.abs(after - before)) < 1e-12
    # the variable pair carries exactly the maximal source correlation
    assert after[3, 3, 0] == pytest.approx(profile.rho, rel=1e-12)
    assert after[0, 0, 0] == pytest.approx(0.5, rel=1e-12)
    # norms transfer exactly
    assert m_sl.slice_norm_sq(0, 3) == pytest.approx(1.0, rel=1e-12)


def test_step_invariance_back_constant_pair():
    profile, params, ctx = qubit_setup(mc=0)
    pair = _toy_pair({}, {}, 0, profile.rho)
    m_choi, n_choi, rep = cp.step_invariance_back(pair, profile, ctx=ctx)
    assert rep.passed
    assert rep.data["n_out"] == 0
    # pure identity content: the output is id / a on a lone answer system
    assert np.max(np.abs(m_choi.matrix - np.eye(2) / 2.0)) < 1e-12


# ---------------------------------------------------------------------------
# stage 8: rounding
# ---------------------------------------------------------------------------

def test_step_round_fixpoint_on_valid_choi():
    choi = random_strategy_choi(2, seed=41)
    out, rep = cp.step_round(choi)
    assert np.max(np.abs(out.matrix - choi.matrix)) < 1e-10
    assert rep.passed
    assert rep.data["eps"] == pytest.approx(0.0, abs=1e-12)


def test_step_round_perturbed_choi_bound_chain():
    gen = np.random.default_rng(42)
    choi = random_strategy_choi(2, seed=42)
    dim_s = 4 * 1
    # Hermitian perturbation with exactly zero answer-marginal
    h = gen.normal(size=(2, 2)) + 1j * gen.normal(size=(2, 2))
    h = (h + h.conj().T) / 2.0
    h -= np.trace(h) * np.eye(2) / 2.0
    g = gen.normal(size=(dim_s, dim_s)) + 1j * gen.normal(size=(dim_s, dim_s))
    g = (g + g.conj().T) / 2.0
    pert = np.kron(g, h)
    bad = superop.ChoiMatrix(choi.matrix + 0.05 * pert, choi.out_dims,
                             choi.in_dims, validate=False)
    out, rep = cp.step_round(bad)
    assert rep.passed, [c for c in rep.checks if not c.passed]
    verdict = superop.is_cptp(
        superop.ChannelMap(out.out_dims, out.in_dims, out), tol=1e-9)
    assert verdict["verdict"]
    headline = next(c for c in rep.checks if c.name == "headline_distance")
    assert headline.measured <= headline.bound + 1e-10
    assert rep.data["eps"] > 0.0


def test_step_round_rejects_broken_marginal():
    # an input supported on a strict subspace of the copy register cannot
    # keep the identity marginal, and the marginal precondition rejects it
    proj = np.diag([1.0, 1.0, 1.0, 0.0]).astype(complex)
    j = np.kron(proj, np.eye(2) / 2.0) * (4.0 / 3.0)
    bad = superop.ChoiMatrix(j, (2, 2, 1), (2,), validate=False)
    with pytest.raises(ValueError):
        cp.step_round(bad)


def test_step_round_complement_inactive_under_marginal():
    # with the identity marginal enforced, the positive part's copy-register
    # trace keeps every direction: min eigenvalue >= 1 - residual, so the
    # complement correction is provably zero on admissible inputs
    for seed in (43, 44, 45):
        choi = random_strategy_choi(1, seed=seed)
        gen = np.random.default_rng(seed)
        h = gen.normal(size=(4, 4)) + 1j * gen.normal(size=(4, 4))
        h = (h + h.conj().T) / 2.0
        h4 = h.reshape(2, 2, 2, 2)
        h -= np.kron(oc.partial_trace(h, [2, 2], [1]),
                     np.eye(2) / 2.0).reshape(4, 4)
        bad = superop.ChoiMatrix(choi.matrix + 0.2 * h, choi.out_dims,
                                 choi.in_dims, validate=False)
        out, rep = cp.step_round(bad)
        comp = next(c for c in rep.checks if c.name == "complement_chain")
        assert comp.measured == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------

def _zeta_ledger_reconciles(report, tol=1e-9):
    """Adjacent stages estimate the same positivity defect with independent
    sample streams; their before/after figures must agree within noise."""
    by_name = {s.stage: s for s in report.stages}
    chain = ["invariance", "dimension_reduce", "smooth_random",
             "multilinearize", "invariance_back"]
    pairs = []
    for left, right in zip(chain, chain[1:]):
        if left not in by_name or right not in by_name:
            continue
        lz, rz = by_name[left].zeta, by_name[right].zeta
        for side in ("m", "n"):
            a = lz.get("%s_after" % side)
            b = rz.get("%s_before" % side)
            if a is None or b is None:
                continue
            se = lz.get("%s_se" % side, 0.0) + rz.get("%s_se" % side, 0.0)
            pairs.append((left, right, side, abs(a - b), 3.0 * se + tol))
    assert pairs, "no Monte Carlo ledger entries found"
    for left, right, side, gap, band in pairs:
        assert gap <= band, (left, right, side, gap, band)


def test_run_pipeline_identity_like_single_copy():
    profile = states.depolarized_mes(2, 0.25)
    params = cp.compute_bound(0.3, 0.2, profile.rho, QDIMS, seed=7,
                              monte_carlo_N=2000,
                              overrides={"d1": 2, "n0": 4, "d2": 2,
                                         "n1": 1, "D": 1})
    ident = superop.ChannelMap.from_apply(lambda x: x.copy(), (2, 1), (2,))
    strategy = cp.StrategyChannels(alice=ident, bob=ident, n_copies=1)
    compressed, report = cp.run_pipeline(strategy, SCALAR_IN, profile,
                                         params)
    assert report.passed, [
        (s.stage, [c.name for c in s.checks if not c.passed])
        for s in report.stages if not s.passed]
    assert compressed.n_copies == 1
    assert report.cptp_m["verdict"] and report.cptp_n["verdict"]
    assert report.total_deviation <= 0.3 + 1e-9
    names = [s.stage for s in report.stages]
    assert names == ["smooth", "regularize", "invariance",
                     "dimension_reduce", "smooth_random", "multilinearize",
                     "invariance_back", "round_m", "round_n", "accounting"]


def test_run_pipeline_random_two_copy_desk_scale():
    profile = states.depolarized_mes(2, 0.25)
    params = cp.compute_bound(0.3, 0.2, profile.rho, QDIMS, seed=11,
                              monte_carlo_N=4000,
                              overrides={"d1": 4, "n0": 16, "d2": 4,
                                         "n1": 4, "D": 8})
    gen = np.random.default_rng(51)
    strategy = cp.StrategyChannels(
        alice=superop.random_cptp((2, 2, 1), (2,), gen),
        bob=superop.random_cptp((2, 2, 1), (2,), gen), n_copies=2)
    compressed, report = cp.run_pipeline(strategy, SCALAR_IN, profile,
                                         params)
    assert report.passed, [
        (s.stage, [c.name for c in s.checks if not c.passed])
        for s in report.stages if not s.passed]
    assert report.cptp_m["verdict"] and report.cptp_n["verdict"]
    assert compressed.n_copies == report.final_copies
    # every stage that transforms the pair re-verifies the identity slice
    for name in ("smooth", "invariance", "smooth_random", "multilinearize",
                 "invariance_back"):
        stage = next(s for s in report.stages if s.stage == name)
        for check in stage.checks:
            if check.name.startswith("identity_slice"):
                assert check.passed
    # triangle accounting: the total movement is controlled by the stage sum
    assert report.total_deviation <= report.triangle_sum + 0.05
    _zeta_ledger_reconciles(report)
    # the report serializes
    blob = json.dumps(report.to_dict())
    assert "accounting" in blob


def test_run_pipeline_desk_notes_and_json():
    profile = states.depolarized_mes(2, 0.25)
    delta, theta, _ = cp.preset_parameters(0.25, profile.rho, QDIMS)
    params = cp.compute_bound(delta, theta, profile.rho, QDIMS, seed=7,
                              monte_carlo_N=1000,
                              overrides={"d1": 4, "n0": 16, "d2": 4,
                                         "n1": 2, "D": 4})
    gen = np.random.default_rng(52)
    strategy = cp.StrategyChannels(
        alice=superop.random_cptp((2, 2, 1), (2,), gen),
        bob=superop.random_cptp((2, 2, 1), (2,), gen), n_copies=2)
    compressed, report = cp.run_pipeline(strategy, SCALAR_IN, profile,
                                         params)
    assert any("desk-scale overrides active" in n for n in report.notes)
    assert report.cptp_m["verdict"] and report.cptp_n["verdict"]
    d = report.to_dict()
    assert d["params"]["effective"]["d1"] == 4
    assert len(d["stages"]) == 10
