"""JSON documents for operators, states, channels, polynomials, games and
strategies.

All floats are written with 17 significant decimal digits, which round-trips
IEEE doubles exactly: parsing a document and re-serializing it yields the
same bytes.  Dict keys keep insertion order, so document construction is
deterministic.  Structural problems (missing keys, wrong shapes, bad types)
raise FormatError; semantic problems (a state that is not a density matrix,
a map that is not a channel) raise plain ValueError so callers can
distinguish parse errors from domain errors.
"""

import json
import math
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from . import gaussian_analysis as ga
from . import game_engine as ge
from . import operator_core as oc
from . import states
from . import superop

DENSITY_TOL = 1e-8


class FormatError(ValueError):
    """The document does not have the expected structure."""


# ===========================================================================
# deterministic JSON text
# ===========================================================================

def format_float(x: float) -> str:
    """17-significant-digit decimal form; always spelled as a float."""
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        raise FormatError("cannot serialize non-finite number %r" % x)
    text = "%.17g" % x
    if "." not in text and "e" not in text and "E" not in text:
        text += ".0"
    return text


def dumps(doc) -> str:
    """Serialize a document to compact, byte-deterministic JSON."""
    out: List[str] = []
    _emit(doc, out)
    return "".join(out)


def _emit(x, out: List[str]) -> None:
    if x is None:
        out.append("null")
    elif isinstance(x, (bool, np.bool_)):
        out.append("true" if x else "false")
    elif isinstance(x, str):
        out.append(json.dumps(x))
    elif isinstance(x, (int, np.integer)):
        out.append(str(int(x)))
    elif isinstance(x, (float, np.floating)):
        out.append(format_float(float(x)))
    elif isinstance(x, dict):
        out.append("{")
        for i, (k, v) in enumerate(x.items()):
            if not isinstance(k, str):
                raise FormatError("JSON object keys must be strings, got %r"
                                  % (k,))
            if i:
                out.append(",")
            out.append(json.dumps(k))
            out.append(":")
            _emit(v, out)
        out.append("}")
    elif isinstance(x, (list, tuple, np.ndarray)):
        out.append("[")
        for i, v in enumerate(list(x)):
            if i:
                out.append(",")
            _emit(v, out)
        out.append("]")
    else:
        raise FormatError("cannot serialize %r" % type(x).__name__)


def loads(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError("invalid JSON: %s" % exc) from None


def _need(doc: dict, key: str, kinds, what: str):
    if not isinstance(doc, dict):
        raise FormatError("%s must be a JSON object, got %r"
                          % (what, type(doc).__name__))
    if key not in doc:
        raise FormatError("%s is missing the %r key" % (what, key))
    value = doc[key]
    if kinds is not None and not isinstance(value, kinds):
        raise FormatError("%s key %r has type %r"
                          % (what, key, type(value).__name__))
    return value


def _dims_list(value, what: str) -> Tuple[int, ...]:
    if not isinstance(value, list) or not value or \
            not all(isinstance(d, int) and not isinstance(d, bool) and d >= 1
                    for d in value):
        raise FormatError("%s must be a nonempty list of positive ints, "
                          "got %r" % (what, value))
    return tuple(int(d) for d in value)


def _number(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError("%s must be a number, got %r" % (what, value))
    return float(value)


# ===========================================================================
# operators and states
# ===========================================================================

def operator_to_doc(matrix: np.ndarray, systems: Sequence[int],
                    repr_kind: str = "dense") -> dict:
    """Operator document: dense row-major [re, im] pairs, or a sparse list
    of standard-basis coefficients for Hermitian operators."""
    systems = tuple(int(d) for d in systems)
    total = int(np.prod(systems))
    matrix = np.asarray(matrix, dtype=complex)
    if matrix.shape != (total, total):
        raise FormatError("matrix shape %r does not match systems %r"
                          % (matrix.shape, systems))
    doc = {"systems": list(systems), "repr": repr_kind}
    if repr_kind == "dense":
        flat = matrix.reshape(-1)
        doc["dense"] = [[float(z.real), float(z.imag)] for z in flat]
    elif repr_kind == "fourier":
        bases = [oc.make_standard_basis(d) for d in systems]
        coeffs = oc.fourier_expand(matrix, bases)
        doc["fourier"] = [{"sigma": list(sigma), "c": float(c)}
                          for sigma, c in sorted(coeffs.items())]
    else:
        raise FormatError("unknown operator repr %r" % repr_kind)
    return doc


def operator_from_doc(doc) -> Tuple[np.ndarray, Tuple[int, ...]]:
    systems = _dims_list(_need(doc, "systems", list, "operator"),
                         "operator systems")
    repr_kind = _need(doc, "repr", str, "operator")
    total = int(np.prod(systems))
    if repr_kind == "dense":
        dense = _need(doc, "dense", list, "operator")
        if len(dense) != total * total:
            raise FormatError("dense operator has %d entries, expected %d"
                              % (len(dense), total * total))
        flat = np.empty(total * total, dtype=complex)
        for k, pair in enumerate(dense):
            if not isinstance(pair, list) or len(pair) != 2:
                raise FormatError("dense entry %d is not an [re, im] pair"
                                  % k)
            flat[k] = complex(_number(pair[0], "re"),
                              _number(pair[1], "im"))
        return flat.reshape(total, total), systems
    if repr_kind == "fourier":
        terms = _need(doc, "fourier", list, "operator")
        coeffs = {}
        for term in terms:
            sigma = _need(term, "sigma", list, "fourier term")
            if len(sigma) != len(systems) or \
                    not all(isinstance(s, int) and not isinstance(s, bool)
                            and 0 <= s < d * d
                            for s, d in zip(sigma, systems)):
                raise FormatError("multi-index %r does not fit systems %r"
                                  % (sigma, list(systems)))
            coeffs[tuple(sigma)] = _number(_need(term, "c", None,
                                                 "fourier term"), "c")
        bases = [oc.make_standard_basis(d) for d in systems]
        return oc.fourier_synthesize(coeffs, bases), systems
    raise FormatError("unknown operator repr %r" % repr_kind)


def state_to_doc(matrix: np.ndarray, systems: Sequence[int],
                 repr_kind: str = "dense") -> dict:
    """State document: an operator tagged as a state, with per-system
    distance of each marginal from maximally mixed."""
    doc = operator_to_doc(matrix, systems, repr_kind)
    doc["kind"] = "state"
    systems = tuple(int(d) for d in systems)
    matrix = np.asarray(matrix, dtype=complex)
    residuals = []
    for k, d in enumerate(systems):
        rest = [i for i in range(len(systems)) if i != k]
        marg = oc.partial_trace(matrix, systems, rest) if rest else matrix
        residuals.append(float(np.max(np.abs(marg - np.eye(d) / d))))
    doc["marginals"] = {
        "residuals": residuals,
        "maximally_mixed": bool(max(residuals) <= states.MARGINAL_TOL),
    }
    return doc


def state_from_doc(doc) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Parse and validate a density matrix; malformed structure raises
    FormatError, a non-state raises ValueError."""
    if _need(doc, "kind", str, "state") != "state":
        raise FormatError("document kind is %r, expected 'state'"
                          % doc.get("kind"))
    matrix, systems = operator_from_doc(doc)
    if np.max(np.abs(matrix - matrix.conj().T)) > DENSITY_TOL:
        raise ValueError("state is not Hermitian")
    evals = np.linalg.eigvalsh(matrix)
    if evals[0] < -DENSITY_TOL:
        raise ValueError("state has negative eigenvalue %g" % evals[0])
    if abs(np.trace(matrix).real - 1.0) > DENSITY_TOL:
        raise ValueError("state has trace %g, expected 1"
                         % np.trace(matrix).real)
    return matrix, systems


# ===========================================================================
# channels
# ===========================================================================

def channel_to_doc(ch: superop.ChannelMap, repr_kind: str = "dense") -> dict:
    in_dims = tuple(int(d) for d in ch.in_dims)
    out_dims = tuple(int(d) for d in ch.out_dims)
    return {
        "in": list(in_dims),
        "out": list(out_dims),
        "choi_adjoint": operator_to_doc(ch.choi_adjoint.matrix,
                                        in_dims + out_dims, repr_kind),
    }


def channel_from_doc(doc, check: bool = True) -> superop.ChannelMap:
    in_dims = _dims_list(_need(doc, "in", list, "channel"), "channel in")
    out_dims = _dims_list(_need(doc, "out", list, "channel"), "channel out")
    matrix, systems = operator_from_doc(_need(doc, "choi_adjoint", dict,
                                              "channel"))
    if systems != in_dims + out_dims:
        raise FormatError("choi_adjoint systems %r do not match in+out %r"
                          % (list(systems), list(in_dims + out_dims)))
    choi = superop.ChoiMatrix(matrix, out_dims=in_dims, in_dims=out_dims,
                              validate=False)
    ch = superop.ChannelMap(in_dims, out_dims, choi)
    if check:
        verdict = superop.is_cptp(ch)
        if not verdict["verdict"]:
            raise ValueError("document is not a channel: min Choi eigenvalue "
                             "%g, marginal residual %g"
                             % (verdict["min_choi_eig"],
                                verdict["marginal_residual"]))
    return ch


# ===========================================================================
# polynomials and random operators
# ===========================================================================

def polynomial_to_doc(poly) -> dict:
    """Polynomial document; multilinear terms list their coordinate subsets,
    Hermite terms list [coordinate, level] pairs."""
    if isinstance(poly, ga.MultilinearPolynomial):
        terms = [{"sigma": list(key), "c": float(c)}
                 for key, c in sorted(poly.coeffs.items())]
        return {"kind": "multilinear", "n": poly.n, "terms": terms}
    if isinstance(poly, ga.HermiteExpansion):
        terms = [{"sigma": [[int(i), int(k)] for i, k in key],
                  "c": float(c)}
                 for key, c in sorted(poly.coeffs.items())]
        return {"kind": "hermite", "n": poly.n, "terms": terms}
    raise FormatError("cannot serialize polynomial %r" % type(poly).__name__)


def _term_entries(doc) -> List[Tuple[list, float]]:
    out = []
    for term in _need(doc, "terms", list, "polynomial"):
        sigma = _need(term, "sigma", list, "polynomial term")
        out.append((sigma, _number(_need(term, "c", None, "polynomial term"),
                                   "c")))
    return out


def polynomial_from_doc(doc) -> Union["ga.MultilinearPolynomial",
                                      "ga.HermiteExpansion"]:
    n = _need(doc, "n", int, "polynomial")
    entries = _term_entries(doc)
    kind = doc.get("kind")
    if kind is None:
        # infer: hermite multi-indices are [coordinate, level] pairs
        pairish = any(isinstance(s, list) for sigma, _ in entries
                      for s in sigma)
        kind = "hermite" if pairish else "multilinear"
    if kind == "multilinear":
        coeffs = {}
        for sigma, c in entries:
            if not all(isinstance(s, int) and not isinstance(s, bool)
                       for s in sigma):
                raise FormatError("multilinear term %r must list coordinate "
                                  "indices" % (sigma,))
            coeffs[tuple(sigma)] = c
        return ga.MultilinearPolynomial(n, coeffs)
    if kind == "hermite":
        coeffs = {}
        for sigma, c in entries:
            key = []
            for s in sigma:
                if not (isinstance(s, list) and len(s) == 2
                        and all(isinstance(v, int) and not isinstance(v, bool)
                                for v in s)):
                    raise FormatError("hermite term %r must list "
                                      "[coordinate, level] pairs" % (sigma,))
                key.append((s[0], s[1]))
            coeffs[tuple(key)] = c
        return ga.HermiteExpansion(n, coeffs)
    raise FormatError("unknown polynomial kind %r" % kind)


def random_operator_to_doc(op: ga.RandomOperator) -> dict:
    """Random operator: polynomials nested under the multi-index of the
    standard-basis component they multiply."""
    entries = {}
    for sigma in sorted(op.coeffs):
        key = ",".join(str(int(s)) for s in sigma)
        entries[key] = polynomial_to_doc(op.coeffs[sigma])
    return {"kind": "random_operator", "systems": op.n_systems,
            "dim": op.dim, "n": op.n_vars, "entries": entries}


def random_operator_from_doc(doc) -> ga.RandomOperator:
    if _need(doc, "kind", str, "random operator") != "random_operator":
        raise FormatError("document kind is %r, expected 'random_operator'"
                          % doc.get("kind"))
    n_systems = _need(doc, "systems", int, "random operator")
    dim = _need(doc, "dim", int, "random operator")
    n_vars = _need(doc, "n", int, "random operator")
    entries = _need(doc, "entries", dict, "random operator")
    coeffs = {}
    for key, poly_doc in entries.items():
        try:
            sigma = tuple(int(s) for s in key.split(",")) if key else ()
        except ValueError:
            raise FormatError("bad multi-index key %r" % key) from None
        coeffs[sigma] = polynomial_from_doc(poly_doc)
    return ga.RandomOperator(n_systems, dim, n_vars, coeffs)


# ===========================================================================
# games and strategies
# ===========================================================================

def game_to_doc(game: ge.FullyQuantumGame, repr_kind: str = "dense") -> dict:
    return {
        "phi_in": state_to_doc(game.phi_in,
                               (game.p_dim, game.q_dim, game.r_dim),
                               repr_kind),
        "m_win": operator_to_doc(game.m_win,
                                 (game.a_dim, game.b_dim, game.r_dim),
                                 repr_kind),
        "systems": {"p": game.p_dim, "q": game.q_dim, "r": game.r_dim,
                    "a": game.a_dim, "b": game.b_dim},
    }


def game_from_doc(doc) -> ge.FullyQuantumGame:
    systems = _need(doc, "systems", dict, "game")
    dims = {}
    for name in ("p", "q", "r", "a", "b"):
        if name not in systems or isinstance(systems[name], bool) or \
                not isinstance(systems[name], int):
            raise FormatError("game systems must give integer %r" % name)
        dims[name] = int(systems[name])
    phi_in, phi_systems = state_from_doc(_need(doc, "phi_in", dict, "game"))
    if phi_systems != (dims["p"], dims["q"], dims["r"]):
        raise FormatError("phi_in systems %r do not match the declared "
                          "question/referee dimensions" % (list(phi_systems),))
    m_win, w_systems = operator_from_doc(_need(doc, "m_win", dict, "game"))
    if w_systems != (dims["a"], dims["b"], dims["r"]):
        raise FormatError("m_win systems %r do not match the declared "
                          "answer/referee dimensions" % (list(w_systems),))
    return ge.FullyQuantumGame(phi_in, m_win, dims["p"], dims["q"],
                               dims["r"], dims["a"], dims["b"])


def strategy_to_doc(strategy: ge.Strategy, shared_state: np.ndarray,
                    state_systems: Sequence[int],
                    repr_kind: str = "dense") -> dict:
    """Strategy document: copy count, the shared per-copy state, and the two
    player channels."""
    return {
        "kind": "strategy",
        "copies": int(strategy.n_copies),
        "shared_state": state_to_doc(shared_state, state_systems, repr_kind),
        "alice": channel_to_doc(strategy.alice, repr_kind),
        "bob": channel_to_doc(strategy.bob, repr_kind),
    }


def strategy_from_doc(doc) -> Tuple[ge.Strategy, np.ndarray,
                                    Tuple[int, ...]]:
    """Parse a strategy document; returns the (validated) strategy plus the
    shared state and its system dimensions."""
    if _need(doc, "kind", str, "strategy") != "strategy":
        raise FormatError("document kind is %r, expected 'strategy'"
                          % doc.get("kind"))
    copies = _need(doc, "copies", int, "strategy")
    if isinstance(copies, bool) or copies < 0:
        raise FormatError("copies must be a nonnegative integer, got %r"
                          % copies)
    psi, psi_systems = state_from_doc(_need(doc, "shared_state", dict,
                                            "strategy"))
    if len(psi_systems) != 2:
        raise FormatError("shared_state must live on two systems, got %r"
                          % (list(psi_systems),))
    alice = channel_from_doc(_need(doc, "alice", dict, "strategy"))
    bob = channel_from_doc(_need(doc, "bob", dict, "strategy"))
    return ge.Strategy(copies, alice, bob), psi, psi_systems
