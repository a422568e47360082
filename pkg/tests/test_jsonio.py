"""Tests for the JSON document formats and their byte-deterministic text."""

import math
import struct

import numpy as np
import pytest

from mesc import game_engine as ge
from mesc import gaussian_analysis as ga
from mesc import jsonio
from mesc import operator_core as oc
from mesc import states
from mesc import superop


def bits(x):
    return struct.pack("<d", float(x))


def random_complex(d, seed):
    gen = np.random.default_rng(seed)
    return gen.normal(size=(d, d)) + 1j * gen.normal(size=(d, d))


def random_observable(d, seed):
    gen = np.random.default_rng(seed)
    g = random_complex(d, seed)
    v = np.linalg.qr(g)[0]
    return (v * gen.uniform(0.0, 1.0, size=d)) @ v.conj().T


def random_density(d, seed):
    g = random_complex(d, seed)
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


# ---------------------------------------------------------------------------
# text layer
# ---------------------------------------------------------------------------

def test_float_formatting_round_trips_exactly():
    gen = np.random.default_rng(1)
    values = [0.0, -0.0, 1.0, 0.75, 1.0 / 3.0, math.pi, 1e-300, -2.5e300]
    values += list(gen.normal(size=50))
    values += list(gen.uniform(0, 1, size=50) * 10.0 ** gen.integers(
        -30, 30, size=50))
    for x in values:
        text = jsonio.format_float(x)
        assert bits(float(text)) == bits(x)
    assert jsonio.format_float(0.75) == "0.75"
    assert jsonio.format_float(1.0) == "1.0"
    assert jsonio.format_float(-0.0) == "-0.0"
    with pytest.raises(jsonio.FormatError):
        jsonio.format_float(float("nan"))
    with pytest.raises(jsonio.FormatError):
        jsonio.format_float(float("inf"))


def test_dumps_deterministic_and_typed():
    doc = {"a": [1, 2.0, True, None, "x\"y"], "b": {"c": -0.5}}
    text = jsonio.dumps(doc)
    assert text == '{"a":[1,2.0,true,null,"x\\"y"],"b":{"c":-0.5}}'
    assert jsonio.loads(text) == doc
    assert jsonio.dumps(jsonio.loads(text)) == text
    with pytest.raises(jsonio.FormatError):
        jsonio.dumps({1: "non-string key"})
    with pytest.raises(jsonio.FormatError):
        jsonio.dumps({"x": object()})
    with pytest.raises(jsonio.FormatError):
        jsonio.loads("{not json")


# ---------------------------------------------------------------------------
# operators and states
# ---------------------------------------------------------------------------

def test_dense_operator_round_trip_is_bit_exact():
    m = random_complex(6, 2)
    doc = jsonio.operator_to_doc(m, (2, 3))
    text = jsonio.dumps(doc)
    back, systems = jsonio.operator_from_doc(jsonio.loads(text))
    assert systems == (2, 3)
    assert np.array_equal(back, m)       # equality of every bit pattern
    assert jsonio.dumps(jsonio.operator_to_doc(back, systems)) == text


def test_fourier_operator_round_trip():
    bases = [oc.make_standard_basis(2), oc.make_standard_basis(2)]
    coeffs = {(0, 0): 0.5, (3, 1): 0.25, (2, 2): -1.125}
    m = oc.fourier_synthesize(coeffs, bases)
    doc = jsonio.operator_to_doc(m, (2, 2), repr_kind="fourier")
    assert {tuple(t["sigma"]): t["c"] for t in doc["fourier"]} == coeffs
    back, systems = jsonio.operator_from_doc(doc)
    assert np.array_equal(back, m)
    text = jsonio.dumps(doc)
    reparsed, _ = jsonio.operator_from_doc(jsonio.loads(text))
    assert jsonio.dumps(jsonio.operator_to_doc(reparsed, systems,
                                               repr_kind="fourier")) == text


def test_operator_structural_errors():
    m = random_complex(2, 3)
    doc = jsonio.operator_to_doc(m, (2,))
    short = dict(doc, dense=doc["dense"][:-1])
    with pytest.raises(jsonio.FormatError):
        jsonio.operator_from_doc(short)
    with pytest.raises(jsonio.FormatError):
        jsonio.operator_from_doc(dict(doc, dense=[[1.0], [0.0]] * 2))
    with pytest.raises(jsonio.FormatError):
        jsonio.operator_from_doc(dict(doc, repr="sparse"))
    with pytest.raises(jsonio.FormatError):
        jsonio.operator_from_doc(dict(doc, systems=[2, 0]))
    with pytest.raises(jsonio.FormatError):
        jsonio.operator_from_doc({"systems": [2]})
    bad_sigma = {"systems": [2], "repr": "fourier",
                 "fourier": [{"sigma": [7], "c": 1.0}]}
    with pytest.raises(jsonio.FormatError):
        jsonio.operator_from_doc(bad_sigma)
    with pytest.raises(jsonio.FormatError):
        jsonio.operator_to_doc(m, (3,))


def test_state_document_marginal_metadata():
    profile = states.depolarized_mes(2, 0.25)
    doc = jsonio.state_to_doc(profile.psi, (2, 2))
    assert doc["kind"] == "state"
    assert doc["marginals"]["maximally_mixed"] is True
    assert max(doc["marginals"]["residuals"]) <= 1e-12
    back, systems = jsonio.state_from_doc(jsonio.loads(jsonio.dumps(doc)))
    assert np.array_equal(back, profile.psi)
    assert systems == (2, 2)

    skew = random_density(4, 4)
    doc2 = jsonio.state_to_doc(skew, (2, 2))
    assert doc2["marginals"]["maximally_mixed"] is False


def test_state_document_rejects_non_states():
    rho = random_density(2, 5)
    doc = jsonio.state_to_doc(rho, (2,))
    with pytest.raises(jsonio.FormatError):
        jsonio.state_from_doc(dict(doc, kind="operator"))
    op_doc = jsonio.operator_to_doc(2.0 * rho, (2,))
    op_doc["kind"] = "state"
    with pytest.raises(ValueError) as err:
        jsonio.state_from_doc(op_doc)
    assert not isinstance(err.value, jsonio.FormatError)
    neg = jsonio.operator_to_doc(np.diag([1.5, -0.5]), (2,))
    neg["kind"] = "state"
    with pytest.raises(ValueError):
        jsonio.state_from_doc(neg)


# ---------------------------------------------------------------------------
# channels
# ---------------------------------------------------------------------------

def test_channel_round_trip_preserves_action():
    gen = np.random.default_rng(6)
    ch = superop.random_cptp((2, 2), (3,), gen)
    doc = jsonio.channel_to_doc(ch)
    assert doc["in"] == [2, 2] and doc["out"] == [3]
    back = jsonio.channel_from_doc(jsonio.loads(jsonio.dumps(doc)))
    assert np.array_equal(back.choi_adjoint.matrix, ch.choi_adjoint.matrix)
    x = random_complex(4, 7)
    assert np.array_equal(back.apply(x), ch.apply(x))


def test_channel_document_errors():
    gen = np.random.default_rng(8)
    ch = superop.random_cptp((2,), (2,), gen)
    doc = jsonio.channel_to_doc(ch)
    wrong = dict(doc, out=[3])
    with pytest.raises(jsonio.FormatError):
        jsonio.channel_from_doc(wrong)
    scaled = jsonio.loads(jsonio.dumps(doc))
    scaled["choi_adjoint"]["dense"] = [[2.0 * re, 2.0 * im] for re, im
                                       in scaled["choi_adjoint"]["dense"]]
    with pytest.raises(ValueError) as err:
        jsonio.channel_from_doc(scaled)
    assert not isinstance(err.value, jsonio.FormatError)
    jsonio.channel_from_doc(scaled, check=False)    # structure alone is fine


# ---------------------------------------------------------------------------
# polynomials and random operators
# ---------------------------------------------------------------------------

def test_polynomial_round_trips():
    lin = ga.MultilinearPolynomial(3, {(0,): 0.5, (1, 2): -0.25, (): 1.0})
    doc = jsonio.polynomial_to_doc(lin)
    back = jsonio.polynomial_from_doc(jsonio.loads(jsonio.dumps(doc)))
    assert isinstance(back, ga.MultilinearPolynomial)
    assert back.n == 3 and back.coeffs == lin.coeffs

    herm = ga.HermiteExpansion(2, {((0, 2),): 1.5, ((0, 1), (1, 1)): -0.5})
    doc2 = jsonio.polynomial_to_doc(herm)
    back2 = jsonio.polynomial_from_doc(jsonio.loads(jsonio.dumps(doc2)))
    assert isinstance(back2, ga.HermiteExpansion)
    assert back2.n == 2 and back2.coeffs == herm.coeffs

    # kind is inferred when absent
    bare = {"n": 3, "terms": doc["terms"]}
    assert isinstance(jsonio.polynomial_from_doc(bare),
                      ga.MultilinearPolynomial)
    bare2 = {"n": 2, "terms": doc2["terms"]}
    assert isinstance(jsonio.polynomial_from_doc(bare2), ga.HermiteExpansion)
    with pytest.raises(jsonio.FormatError):
        jsonio.polynomial_from_doc({"n": 1, "terms": [], "kind": "laurent"})
    with pytest.raises(jsonio.FormatError):
        jsonio.polynomial_from_doc({"n": 1, "terms": [{"sigma": [0.5],
                                                       "c": 1.0}],
                                    "kind": "multilinear"})


def test_random_operator_round_trip():
    op = ga.RandomOperator(2, 2, 3, {
        (0, 0): ga.MultilinearPolynomial(3, {(): 0.5}),
        (3, 1): ga.MultilinearPolynomial(3, {(0,): 1.0, (1, 2): 0.25}),
        (1, 2): ga.HermiteExpansion(3, {((2, 2),): -0.75}),
    })
    doc = jsonio.random_operator_to_doc(op)
    back = jsonio.random_operator_from_doc(jsonio.loads(jsonio.dumps(doc)))
    assert back.n_systems == 2 and back.dim == 2 and back.n_vars == 3
    assert set(back.coeffs) == set(op.coeffs)
    for sigma in op.coeffs:
        assert type(back.coeffs[sigma]) is type(op.coeffs[sigma])
        assert back.coeffs[sigma].coeffs == op.coeffs[sigma].coeffs
    with pytest.raises(jsonio.FormatError):
        jsonio.random_operator_from_doc(dict(doc, entries={"x,y": {}}))


# ---------------------------------------------------------------------------
# games and strategies
# ---------------------------------------------------------------------------

def test_game_round_trip():
    game = ge.FullyQuantumGame(random_density(8, 9),
                               random_observable(8, 10), 2, 2, 2, 2, 2)
    doc = jsonio.game_to_doc(game)
    text = jsonio.dumps(doc)
    back = jsonio.game_from_doc(jsonio.loads(text))
    assert np.array_equal(back.phi_in, game.phi_in)
    assert np.array_equal(back.m_win, game.m_win)
    assert back.in_dims == game.in_dims and back.out_dims == game.out_dims
    assert jsonio.dumps(jsonio.game_to_doc(back)) == text


def test_game_document_errors():
    game = ge.FullyQuantumGame(random_density(8, 11),
                               random_observable(8, 12), 2, 2, 2, 2, 2)
    doc = jsonio.loads(jsonio.dumps(jsonio.game_to_doc(game)))
    bad = dict(doc, systems=dict(doc["systems"], r=3))
    with pytest.raises(jsonio.FormatError):
        jsonio.game_from_doc(bad)
    no_q = dict(doc, systems={k: v for k, v in doc["systems"].items()
                              if k != "q"})
    with pytest.raises(jsonio.FormatError):
        jsonio.game_from_doc(no_q)
    # structurally fine but semantically not a game: observable above one
    loud = jsonio.loads(jsonio.dumps(doc))
    loud["m_win"]["dense"] = [[3.0 * re, 3.0 * im] for re, im
                              in loud["m_win"]["dense"]]
    with pytest.raises(ValueError) as err:
        jsonio.game_from_doc(loud)
    assert not isinstance(err.value, jsonio.FormatError)


def test_strategy_round_trip_and_validation():
    profile = states.depolarized_mes(2, 0.25)
    gen = np.random.default_rng(13)
    strat = ge.Strategy(1, superop.random_cptp((2, 2), (2,), gen),
                        superop.random_cptp((2, 2), (2,), gen))
    doc = jsonio.strategy_to_doc(strat, profile.psi, (2, 2))
    text = jsonio.dumps(doc)
    back, psi, systems = jsonio.strategy_from_doc(jsonio.loads(text))
    assert back.n_copies == 1
    assert systems == (2, 2)
    assert np.array_equal(psi, profile.psi)
    assert np.array_equal(back.alice.choi_adjoint.matrix,
                          strat.alice.choi_adjoint.matrix)
    assert np.array_equal(back.bob.choi_adjoint.matrix,
                          strat.bob.choi_adjoint.matrix)

    with pytest.raises(jsonio.FormatError):
        jsonio.strategy_from_doc(dict(jsonio.loads(text), copies=-1))
    tripartite = jsonio.state_to_doc(random_density(8, 14), (2, 2, 2))
    with pytest.raises(jsonio.FormatError):
        jsonio.strategy_from_doc(dict(jsonio.loads(text),
                                      shared_state=tripartite))
    broken = jsonio.loads(text)
    broken["alice"]["choi_adjoint"]["dense"] = [
        [0.5 * re, 0.5 * im]
        for re, im in broken["alice"]["choi_adjoint"]["dense"]]
    with pytest.raises(ValueError) as err:
        jsonio.strategy_from_doc(broken)
    assert not isinstance(err.value, jsonio.FormatError)
