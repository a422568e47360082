"""Nonlocal games with quantum questions and answers, played on shared copies
of a noisy entangled state.

A game is an input state on the two question registers plus a referee
register, together with a winning observable on the two answer registers and
the referee register.  A strategy is a pair of channels, one per player, each
consuming that player's halves of the shared copies along with the question
register.  This module evaluates winning probabilities exactly (dense, with a
dimension cap), produces the correlation tables the compression pipeline
reasons about, optimizes strategies by alternating projected ascent, brackets
the optimum on tiny games with an epsilon net, and compares a strategy's value
before and after compression.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import operator_core as oc
from . import superop
from . import states
from . import compression_pipeline as cp

DIM_CAP = 256          # total Hilbert dimension for exact dense evaluation
GAME_TOL = 1e-10
CPTP_TOL = 1e-9


class CapExceeded(RuntimeError):
    """A configured resource cap (dimension or net size) was exceeded."""


# ===========================================================================
# domain types
# ===========================================================================

class FullyQuantumGame:
    """Input state on question x question x referee, winning observable on
    answer x answer x referee.

    `phi_in` must be a density matrix (PSD, unit trace) over dimensions
    p*q*r and `m_win` an observable with spectrum in [0, 1] over a*b*r.
    """

    def __init__(self, phi_in: np.ndarray, m_win: np.ndarray,
                 p_dim: int, q_dim: int, r_dim: int,
                 a_dim: int, b_dim: int):
        self.p_dim, self.q_dim, self.r_dim = int(p_dim), int(q_dim), int(r_dim)
        self.a_dim, self.b_dim = int(a_dim), int(b_dim)
        for name, d in (("p", self.p_dim), ("q", self.q_dim),
                        ("r", self.r_dim), ("a", self.a_dim),
                        ("b", self.b_dim)):
            if d < 1:
                raise ValueError("%s dimension must be positive, got %d"
                                 % (name, d))
        din = self.p_dim * self.q_dim * self.r_dim
        dout = self.a_dim * self.b_dim * self.r_dim
        phi_in = np.asarray(phi_in, dtype=complex)
        m_win = np.asarray(m_win, dtype=complex)
        if phi_in.shape != (din, din):
            raise ValueError("input state has shape %r, expected (%d, %d)"
                             % (phi_in.shape, din, din))
        if m_win.shape != (dout, dout):
            raise ValueError("winning observable has shape %r, expected "
                             "(%d, %d)" % (m_win.shape, dout, dout))
        if np.max(np.abs(phi_in - phi_in.conj().T)) > GAME_TOL:
            raise ValueError("input state is not Hermitian")
        if np.max(np.abs(m_win - m_win.conj().T)) > GAME_TOL:
            raise ValueError("winning observable is not Hermitian")
        evals = np.linalg.eigvalsh(phi_in)
        if evals[0] < -GAME_TOL:
            raise ValueError("input state has negative eigenvalue %g"
                             % evals[0])
        if abs(np.trace(phi_in).real - 1.0) > GAME_TOL:
            raise ValueError("input state has trace %g, expected 1"
                             % np.trace(phi_in).real)
        wvals = np.linalg.eigvalsh(m_win)
        if wvals[0] < -GAME_TOL or wvals[-1] > 1.0 + GAME_TOL:
            raise ValueError("winning observable spectrum [%g, %g] leaves "
                             "[0, 1]" % (wvals[0], wvals[-1]))
        self.phi_in = phi_in
        self.m_win = m_win

    @property
    def in_dims(self) -> Tuple[int, int, int]:
        return (self.p_dim, self.q_dim, self.r_dim)

    @property
    def out_dims(self) -> Tuple[int, int, int]:
        return (self.a_dim, self.b_dim, self.r_dim)

    def game_dims(self, s_dim: int, t_dim: Optional[int] = None) -> cp.GameDims:
        """Dimension record for the compression pipeline, given the local
        dimensions of the shared state."""
        t = s_dim if t_dim is None else t_dim
        return cp.GameDims(p=self.p_dim, q=self.q_dim, r=self.r_dim,
                           s=s_dim, t=t, a=self.a_dim, b=self.b_dim)


@dataclasses.dataclass
class Strategy:
    """A pair of player channels over `n_copies` shared copies.

    Alice maps her copy halves and the first question register to the first
    answer; Bob likewise on the other side.  Construction verifies both maps
    are channels unless `validate` is switched off.
    """

    n_copies: int
    alice: superop.ChannelMap
    bob: superop.ChannelMap
    validate: dataclasses.InitVar[bool] = True

    def __post_init__(self, validate: bool):
        if self.n_copies < 0:
            raise ValueError("copy count must be nonnegative")
        for name, ch in (("alice", self.alice), ("bob", self.bob)):
            if len(ch.in_dims) != self.n_copies + 1:
                raise ValueError("%s consumes %d factors but the strategy "
                                 "declares %d copies plus one question"
                                 % (name, len(ch.in_dims), self.n_copies))
            if len(ch.out_dims) != 1:
                raise ValueError("%s must output a single answer register"
                                 % name)
            if validate:
                verdict = superop.is_cptp(ch, tol=CPTP_TOL)
                if not verdict["verdict"]:
                    raise ValueError("%s is not a channel: min Choi "
                                     "eigenvalue %g, marginal residual %g"
                                     % (name, verdict["min_choi_eig"],
                                        verdict["marginal_residual"]))


@dataclasses.dataclass
class ValueReport:
    """Outcome of a value computation: the probability itself plus whatever
    the producing routine can say about how it was found."""

    value: float
    iterations: int = 0
    restarts: List[dict] = dataclasses.field(default_factory=list)
    radius: float = 0.0
    bracket: Optional[Tuple[float, float]] = None
    notes: List[str] = dataclasses.field(default_factory=list)

    def __post_init__(self):
        if not -1e-8 <= self.value <= 1.0 + 1e-8:
            raise ValueError("winning probability %g leaves [0, 1]"
                             % self.value)
        self.value = float(min(max(self.value, 0.0), 1.0))

    def to_dict(self) -> dict:
        out = {
            "value": self.value,
            "iterations": self.iterations,
            "restarts": list(self.restarts),
            "radius": self.radius,
            "notes": list(self.notes),
        }
        if self.bracket is not None:
            out["bracket"] = [float(self.bracket[0]), float(self.bracket[1])]
        return out


# ===========================================================================
# exact evaluation
# ===========================================================================

def _check_strategy_dims(game: FullyQuantumGame, strategy,
                         profile: states.NoisyMesProfile) -> int:
    n = int(strategy.n_copies)
    want_a = (profile.s_dim,) * n + (game.p_dim,)
    want_b = (profile.t_dim,) * n + (game.q_dim,)
    if tuple(strategy.alice.in_dims) != want_a:
        raise ValueError("alice consumes %r, expected %r"
                         % (tuple(strategy.alice.in_dims), want_a))
    if tuple(strategy.bob.in_dims) != want_b:
        raise ValueError("bob consumes %r, expected %r"
                         % (tuple(strategy.bob.in_dims), want_b))
    if tuple(strategy.alice.out_dims) != (game.a_dim,):
        raise ValueError("alice answers in dimension %r, the game expects %d"
                         % (tuple(strategy.alice.out_dims), game.a_dim))
    if tuple(strategy.bob.out_dims) != (game.b_dim,):
        raise ValueError("bob answers in dimension %r, the game expects %d"
                         % (tuple(strategy.bob.out_dims), game.b_dim))
    return n


def _entangled_input(game: FullyQuantumGame, profile: states.NoisyMesProfile,
                     n: int) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """The joint input: n shared copies and the referee state, arranged on
    [S^n, P, T^n, Q, R]."""
    s, t = profile.s_dim, profile.t_dim
    if n == 0:
        full = np.asarray(game.phi_in, dtype=complex)
    else:
        copies = np.asarray(profile.psi, dtype=complex)
        for _ in range(n - 1):
            copies = np.kron(copies, profile.psi)
        # collect the S halves in front of the T halves
        perm = [2 * k for k in range(n)] + [2 * k + 1 for k in range(n)]
        copies = oc.permute_systems(copies, (s, t) * n, perm)
        full = np.kron(copies, game.phi_in)
        dims = (s,) * n + (t,) * n + game.in_dims
        perm = (list(range(n)) + [2 * n] + list(range(n, 2 * n))
                + [2 * n + 1, 2 * n + 2])
        full = oc.permute_systems(full, dims, perm)
    out_dims = (s,) * n + (game.p_dim,) + (t,) * n + (game.q_dim,
                                                      game.r_dim)
    return full, out_dims


def winning_probability(game: FullyQuantumGame, strategy,
                        profile: states.NoisyMesProfile, *,
                        dim_cap: int = DIM_CAP) -> float:
    """Exact winning probability of `strategy` on `game`, playing over
    `strategy.n_copies` copies of the profile's shared state."""
    n = _check_strategy_dims(game, strategy, profile)
    total = (profile.s_dim ** n * profile.t_dim ** n * game.p_dim
             * game.q_dim * game.r_dim)
    if total > dim_cap:
        raise CapExceeded("total dimension %d exceeds the dense evaluation "
                          "cap %d" % (total, dim_cap))
    state, dims = _entangled_input(game, profile, n)
    out, dims = superop.apply_embedded(strategy.alice, state, dims, 0)
    out, dims = superop.apply_embedded(strategy.bob, out, dims, 1)
    return float(np.trace(out @ game.m_win).real)


def win_coefficients(game: FullyQuantumGame) -> np.ndarray:
    """Expansion of the winning observable over the normalized product frame
    used by the correlation table, shaped (a^2, b^2, r^2).

    The winning probability of any strategy is the elementwise pairing of
    these coefficients with the strategy's correlation table.
    """
    a, b, r = game.a_dim, game.b_dim, game.r_dim
    ael = oc.make_standard_basis(a).elements
    bel = oc.make_standard_basis(b).elements
    rel = oc.make_standard_basis(r).elements
    w6 = game.m_win.reshape(a, b, r, a, b, r)
    w = np.einsum("ijklmn,ali,bmj,cnk->abc", w6, ael, bel, rel)
    w = w / math.sqrt(a * b * r)
    if np.max(np.abs(w.imag)) > GAME_TOL:
        raise ValueError("winning observable produced complex coefficients")
    return np.ascontiguousarray(w.real)


def table_value(table: np.ndarray, coefficients: np.ndarray) -> float:
    """Winning probability reconstructed from a correlation table."""
    table = np.asarray(table, dtype=float)
    coefficients = np.asarray(coefficients, dtype=float)
    if table.shape != coefficients.shape:
        raise ValueError("table shape %r does not match coefficients %r"
                         % (table.shape, coefficients.shape))
    return float(np.sum(table * coefficients))


def correlation_table(strategy, profile: states.NoisyMesProfile,
                      game: FullyQuantumGame, *, r_index: int = 0,
                      dim_cap: int = DIM_CAP) -> np.ndarray:
    """Correlation table of a strategy: entry (a, b, r) pairs the two
    adjoint-slice frames and the referee frame against the joint input."""
    n = _check_strategy_dims(game, strategy, profile)
    total = (profile.s_dim ** n * profile.t_dim ** n * game.p_dim
             * game.q_dim * game.r_dim)
    if total > dim_cap:
        raise CapExceeded("total dimension %d exceeds the dense evaluation "
                          "cap %d" % (total, dim_cap))
    dims = game.game_dims(profile.s_dim, profile.t_dim)
    corr = cp.build_correlation_context(game.phi_in, profile, dims, r_index)
    m_slices = cp.FourierSlices.from_choi(
        strategy.alice.choi_adjoint, n, profile.basis_s, corr.diag.basis_p,
        oc.make_standard_basis(game.a_dim))
    n_slices = cp.FourierSlices.from_choi(
        strategy.bob.choi_adjoint, n, profile.basis_t, corr.diag.basis_q,
        oc.make_standard_basis(game.b_dim))
    return cp.correlation_table(m_slices, n_slices, corr)


# ===========================================================================
# linear structure in a single player's channel
# ===========================================================================

def _forward_choi(ch: superop.ChannelMap) -> np.ndarray:
    return superop.choi_of(ch).matrix


def _channel_from_forward_choi(j: np.ndarray, in_dims: Sequence[int],
                               out_dims: Sequence[int]) -> superop.ChannelMap:
    din = int(np.prod(tuple(in_dims)))
    dout = int(np.prod(tuple(out_dims)))
    j4 = np.asarray(j, dtype=complex).reshape(dout, din, dout, din)
    return superop.ChannelMap.from_apply(
        lambda x: np.einsum("xgyh,gh->xy", j4, x), in_dims, out_dims)


def _fix_marginal(j: np.ndarray, dout: int, din: int) -> np.ndarray:
    """Smallest shift making the output partial trace of a forward Choi the
    identity (the affine trace-preservation constraint)."""
    j4 = j.reshape(dout, din, dout, din)
    marg = np.einsum("xgxh->gh", j4)
    fix = np.einsum("xy,gh->xgyh", np.eye(dout) / dout,
                    np.eye(din) - marg)
    return (j4 + fix).reshape(dout * din, dout * din)


def _project_cptp(j: np.ndarray, in_dims: Sequence[int],
                  out_dims: Sequence[int]
                  ) -> Tuple[superop.ChannelMap, np.ndarray, float]:
    """Round a Hermitian forward Choi onto a channel: fix the marginal
    affinely, then positivity-round.  Returns the channel, its forward Choi
    and the positivity defect that was rounded away."""
    din = int(np.prod(tuple(in_dims)))
    dout = int(np.prod(tuple(out_dims)))
    j = _fix_marginal(np.asarray(j, dtype=complex), dout, din)
    ch = _channel_from_forward_choi(j, in_dims, out_dims)
    rounded, rep = cp.step_round(ch.choi_adjoint)
    out = superop.ChannelMap(rounded.out_dims, rounded.in_dims, rounded)
    return out, _forward_choi(out), float(rep.data["eps"])


def _gradient(xi: np.ndarray, din: int, w: np.ndarray, dout: int
              ) -> np.ndarray:
    """Gradient of the winning probability in one player's forward Choi.

    `xi` is the joint input with the other player's channel already applied,
    arranged with this player's input block first; `w` is the winning
    observable arranged with this player's answer block first.  The value of
    any forward Choi J is then the plain elementwise pairing sum(J * G).
    """
    rest = xi.shape[0] // din
    xi4 = xi.reshape(din, rest, din, rest)
    w4 = w.reshape(dout, rest, dout, rest)
    c = np.einsum("gmhn,ynxm->xygh", xi4, w4)
    g = c.transpose(0, 2, 1, 3).reshape(dout * din, dout * din)
    return 0.5 * (g + g.conj().T)


def _pair_value(ja: np.ndarray, grad_a: np.ndarray) -> float:
    return float(np.real(np.sum(ja * grad_a)))


class _SeesawWorkspace:
    """Fixed data for alternating ascent on one game: the joint input and the
    permutations that bring either player's block to the front."""

    def __init__(self, game: FullyQuantumGame,
                 profile: states.NoisyMesProfile, n: int, dim_cap: int):
        total = (profile.s_dim ** n * profile.t_dim ** n * game.p_dim
                 * game.q_dim * game.r_dim)
        if total > dim_cap:
            raise CapExceeded("total dimension %d exceeds the dense "
                              "evaluation cap %d" % (total, dim_cap))
        self.game = game
        self.profile = profile
        self.n = n
        self.state, self.dims = _entangled_input(game, profile, n)
        self.in_dims_a = (profile.s_dim,) * n + (game.p_dim,)
        self.in_dims_b = (profile.t_dim,) * n + (game.q_dim,)
        self.din_a = int(np.prod(self.in_dims_a))
        self.din_b = int(np.prod(self.in_dims_b))
        a, b, r = game.a_dim, game.b_dim, game.r_dim
        # observable with bob's answer leading, for bob's gradient
        self.w_alice_first = game.m_win
        self.w_bob_first = oc.permute_systems(game.m_win, (a, b, r),
                                              [1, 0, 2])

    def gradient_alice(self, bob: superop.ChannelMap) -> np.ndarray:
        xi, dims = superop.apply_embedded(bob, self.state, self.dims,
                                          self.n + 1)
        # dims is [S^n, P, B, R]; alice's block is already leading
        return _gradient(xi, self.din_a, self.w_alice_first, self.game.a_dim)

    def gradient_bob(self, alice: superop.ChannelMap) -> np.ndarray:
        zeta, dims = superop.apply_embedded(alice, self.state, self.dims, 0)
        # dims is [A, T^n, Q, R]; rotate bob's block to the front
        k = len(dims)
        perm = list(range(1, k - 1)) + [0, k - 1]
        zeta = oc.permute_systems(zeta, dims, perm)
        return _gradient(zeta, self.din_b, self.w_bob_first, self.game.b_dim)

    def value(self, ja: np.ndarray, bob: superop.ChannelMap) -> float:
        return _pair_value(ja, self.gradient_alice(bob))


def optimize_value_seesaw(game: FullyQuantumGame,
                          profile: states.NoisyMesProfile, n: int, *,
                          restarts: int = 4, iters: int = 60, seed: int = 0,
                          dim_cap: int = DIM_CAP
                          ) -> Tuple[Strategy, ValueReport]:
    """Alternating projected ascent over strategy pairs at a fixed copy count.

    With one channel fixed the winning probability is linear in the other
    channel's Choi matrix, so each half-step runs projected gradient ascent
    (rounding back onto the channel set) with backtracking until the step
    size stalls below 1e-7.  Only improving steps are accepted, so the value
    is monotone along every restart; the best restart wins, first index on
    ties.  A heuristic lower bound, not a certificate.
    """
    if restarts < 1 or iters < 0:
        raise ValueError("need at least one restart and a nonnegative "
                         "iteration budget")
    ws = _SeesawWorkspace(game, profile, n, dim_cap)
    best: Optional[dict] = None
    trace: List[dict] = []

    for restart in range(restarts):
        rng = np.random.default_rng([seed, restart])
        alice = superop.random_cptp(ws.in_dims_a, (game.a_dim,), rng)
        bob = superop.random_cptp(ws.in_dims_b, (game.b_dim,), rng)
        ja, jb = _forward_choi(alice), _forward_choi(bob)
        cur = winning_probability(game, Strategy(n, alice, bob,
                                                 validate=False),
                                  profile, dim_cap=dim_cap)
        trajectory = [float(cur)]
        sweeps_used = 0
        for sweep in range(iters):
            improved = False
            # alice half-step
            grad = ws.gradient_alice(bob)
            alice, ja, gain = _ascend(alice, ja, grad, ws.in_dims_a,
                                      (game.a_dim,))
            if gain > 0.0:
                cur += gain
                improved = True
            # bob half-step
            grad = ws.gradient_bob(alice)
            bob, jb, gain = _ascend(bob, jb, grad, ws.in_dims_b,
                                    (game.b_dim,))
            if gain > 0.0:
                cur += gain
                improved = True
            trajectory.append(float(cur))
            if not improved:
                break
            sweeps_used = sweep + 1
        entry = {"restart": restart, "value": float(cur),
                 "sweeps": sweeps_used, "trajectory": trajectory}
        trace.append(entry)
        if best is None or cur > best["value"] + 1e-15:
            best = {"value": float(cur), "alice": alice, "bob": bob,
                    "restart": restart, "sweeps": sweeps_used}

    strategy = Strategy(n, best["alice"], best["bob"])
    report = ValueReport(value=best["value"], iterations=best["sweeps"],
                         restarts=trace,
                         notes=["alternating projected ascent; heuristic "
                                "lower bound from %d restarts" % restarts])
    return strategy, report


def _ascend(ch: superop.ChannelMap, j: np.ndarray, grad: np.ndarray,
            in_dims: Sequence[int], out_dims: Sequence[int]
            ) -> Tuple[superop.ChannelMap, np.ndarray, float]:
    """One player's half-step: repeated projected gradient steps with
    backtracking, until no step above the stall threshold improves."""
    best_val = _pair_value(j, grad)
    gain_total = 0.0
    # the objective is Re sum(J * grad) = <J, conj(grad)> over Hermitian J,
    # so the ascent direction is the conjugate
    direction = grad.conj()
    scale = max(float(np.linalg.norm(grad)), 1e-30)
    for _ in range(64):
        step = 1.0 / scale
        accepted = False
        while step * scale >= 1e-7:
            cand_ch, cand_j, _ = _project_cptp(j + step * direction,
                                               in_dims, out_dims)
            v = _pair_value(cand_j, grad)
            if v > best_val + 1e-12:
                gain_total += v - best_val
                best_val = v
                ch, j = cand_ch, cand_j
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    return ch, j, gain_total


# ===========================================================================
# epsilon-net bracketing
# ===========================================================================

def _tp_directions(a_dim: int, din: int) -> np.ndarray:
    """Orthonormal Hermitian directions spanning the trace-preserving slice
    around the maximally mixing Choi (answer part traceless)."""
    ael = oc.make_standard_basis(a_dim).elements
    cel = oc.make_standard_basis(din).elements
    dirs = [np.kron(ael[i], cel[j])
            for i in range(1, a_dim * a_dim) for j in range(din * din)]
    return np.stack(dirs)


def _net_points(a_dim: int, din: int, net_step: float
                ) -> Tuple[np.ndarray, float, int]:
    """Axis values, per-axis covering radius and axis count for one player."""
    k = (a_dim * a_dim - 1) * din * din
    width = math.sqrt(din / a_dim)
    kmax = int(math.floor(width / net_step + 1e-12))
    axis = np.arange(-kmax, kmax + 1) * net_step
    percov = max(net_step / 2.0, width - kmax * net_step)
    return axis, percov, k


def brute_force_value(game: FullyQuantumGame,
                      profile: states.NoisyMesProfile, n: int,
                      net_step: float, *, point_cap: int = 200000,
                      dim_cap: int = DIM_CAP
                      ) -> Tuple[Tuple[float, float], ValueReport]:
    """Bracket the optimal value by enumerating a rounded Hermitian net.

    Each player's Choi is gridded over the trace-preserving slice around the
    maximally mixing channel and rounded onto the channel set; the bracket
    combines the best value found with a Lipschitz radius from the bilinear
    kernel's operator norm, the covering radius of the grid, and the measured
    rounding displacement.
    """
    if net_step <= 0.0:
        raise ValueError("net step must be positive")
    ws = _SeesawWorkspace(game, profile, n, dim_cap)
    axis_a, percov_a, k_a = _net_points(game.a_dim, ws.din_a, net_step)
    axis_b, percov_b, k_b = _net_points(game.b_dim, ws.din_b, net_step)
    count_a = len(axis_a) ** k_a
    count_b = len(axis_b) ** k_b
    if count_a * count_b > point_cap:
        raise CapExceeded("net needs %d channel pairs, over the cap %d"
                          % (count_a * count_b, point_cap))

    dirs_a = _tp_directions(game.a_dim, ws.din_a)
    dirs_b = _tp_directions(game.b_dim, ws.din_b)
    d_a = game.a_dim * ws.din_a
    d_b = game.b_dim * ws.din_b
    mix_a = np.kron(np.eye(game.a_dim) / game.a_dim, np.eye(ws.din_a))
    mix_b = np.kron(np.eye(game.b_dim) / game.b_dim, np.eye(ws.din_b))

    def enumerate_side(axis, k, dirs, mix, in_dims, out_dims):
        chans, chois, disp = [], [], 0.0
        for theta in itertools.product(axis, repeat=k):
            j = mix + np.tensordot(np.asarray(theta), dirs, axes=(0, 0))
            ch, j_round, _ = _project_cptp(j, in_dims, out_dims)
            chans.append(ch)
            chois.append(j_round)
            disp = max(disp, float(np.linalg.norm(j_round - j)))
        return chans, chois, disp

    chans_a, chois_a, disp_a = enumerate_side(
        axis_a, k_a, dirs_a, mix_a, ws.in_dims_a, (game.a_dim,))
    chans_b, chois_b, disp_b = enumerate_side(
        axis_b, k_b, dirs_b, mix_b, ws.in_dims_b, (game.b_dim,))

    # bilinear kernel in orthonormal Hermitian coordinates on both sides:
    # value = theta_a . kappa . theta_b for J = mix-free expansion coefficients
    basis_full_a = oc.make_standard_basis(d_a).elements
    basis_full_b = oc.make_standard_basis(d_b).elements
    kappa = np.zeros((d_a * d_a, d_b * d_b))
    for col in range(d_b * d_b):
        ch_dir = _channel_from_forward_choi(basis_full_b[col], ws.in_dims_b,
                                            (game.b_dim,))
        g = ws.gradient_alice(ch_dir)
        kappa[:, col] = np.real(np.einsum("ixy,xy->i", basis_full_a, g))
    k_op = float(np.linalg.norm(kappa, ord=2))

    best, best_idx = -np.inf, (0, 0)
    for ib, chb in enumerate(chans_b):
        grad_a = ws.gradient_alice(chb)
        for ia, ja in enumerate(chois_a):
            v = _pair_value(ja, grad_a)
            if v > best + 1e-15:
                best, best_idx = v, (ia, ib)

    cov_a = math.sqrt(d_a) * percov_a * math.sqrt(k_a) + disp_a
    cov_b = math.sqrt(d_b) * percov_b * math.sqrt(k_b) + disp_b
    # any channel Choi has Frobenius norm at most its trace, the input dim
    lip_a = k_op * (ws.din_b / math.sqrt(d_b)) / math.sqrt(d_a)
    lip_b = k_op * (ws.din_a / math.sqrt(d_a)) / math.sqrt(d_b)
    raw_radius = lip_a * cov_a + lip_b * cov_b

    lo = float(min(max(best, 0.0), 1.0))
    hi = float(min(1.0, lo + raw_radius))
    report = ValueReport(
        value=lo, iterations=count_a * count_b, radius=hi - lo,
        bracket=(lo, hi),
        notes=["net of %d x %d rounded channels, kernel norm %.3g, "
               "covering %.3g/%.3g, rounding displacement %.3g/%.3g"
               % (count_a, count_b, k_op, cov_a, cov_b, disp_a, disp_b),
               "best pair at indices (%d, %d)" % best_idx])
    return (lo, hi), report


# ===========================================================================
# compression comparison
# ===========================================================================

@dataclasses.dataclass
class CompressionComparison:
    """Before/after record for one strategy through the full pipeline."""

    val_before: float
    val_after: float
    table_before: np.ndarray
    table_after: np.ndarray
    max_table_deviation: float
    w_l1: float
    aggregation_bound: float
    checks: List[cp.BoundCheck]
    pipeline: "cp.PipelineReport"
    notes: List[str] = dataclasses.field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks) and self.pipeline.passed

    def to_dict(self) -> dict:
        return {
            "val_before": self.val_before,
            "val_after": self.val_after,
            "max_table_deviation": self.max_table_deviation,
            "w_l1": self.w_l1,
            "aggregation_bound": self.aggregation_bound,
            "table_before": np.asarray(self.table_before).tolist(),
            "table_after": np.asarray(self.table_after).tolist(),
            "checks": [c.to_dict() for c in self.checks],
            "pipeline": self.pipeline.to_dict(),
            "passed": self.passed,
            "notes": list(self.notes),
        }


def compare_compression(game: FullyQuantumGame,
                        profile: states.NoisyMesProfile, strategy,
                        params: cp.PipelineParams, *, r_index: int = 0,
                        dim_cap: int = DIM_CAP) -> CompressionComparison:
    """Run the compression pipeline and audit the value movement.

    Reports the winning probability before and after, the largest correlation
    table entry moved, and the headline aggregation check: the value drop is
    at most (a*b*r)^{3/2} times the largest table deviation.
    """
    if not params.desk_scale:
        raise CapExceeded("comparison runs need desk-scale parameter "
                          "overrides; the certified copy counts are "
                          "astronomically large")
    compressed, pipe = cp.run_pipeline(strategy, game.phi_in, profile,
                                       params, r_index=r_index)
    val_before = winning_probability(game, strategy, profile,
                                     dim_cap=dim_cap)
    val_after = winning_probability(game, compressed, profile,
                                    dim_cap=dim_cap)
    w = win_coefficients(game)
    table_before = np.asarray(pipe.table_initial, dtype=float)
    table_after = np.asarray(pipe.table_final, dtype=float)
    vb_table = table_value(table_before, w)
    va_table = table_value(table_after, w)
    max_dev = float(np.max(np.abs(table_after - table_before)))
    w_l1 = float(np.sum(np.abs(w)))
    agg = float((game.a_dim * game.b_dim * game.r_dim) ** 1.5)
    drop = abs(val_before - val_after)

    checks = []

    def check(name, measured, bound, note=""):
        checks.append(cp.BoundCheck(name, float(measured), float(bound),
                                    bool(measured <= bound), note))

    check("route_agreement_before", abs(val_before - vb_table), 1e-10,
          "dense evaluation vs table functional")
    check("route_agreement_after", abs(val_after - va_table), 1e-10,
          "dense evaluation vs table functional")
    check("coefficient_l1", w_l1, agg + 1e-9,
          "observable expansion mass vs (a*b*r)^{3/2}")
    check("value_vs_coefficients", drop, w_l1 * max_dev + 1e-9,
          "value drop vs expansion mass times table deviation")
    check("value_aggregation", drop, agg * max_dev + 1e-9,
          "value drop vs (a*b*r)^{3/2} times table deviation")

    return CompressionComparison(
        val_before=val_before, val_after=val_after,
        table_before=table_before, table_after=table_after,
        max_table_deviation=max_dev, w_l1=w_l1, aggregation_bound=agg,
        checks=checks, pipeline=pipe,
        notes=["compressed onto %d copies" % compressed.n_copies])
