"""Command line surface: ``mesc <command>``.

Five batch commands tie the library together:

- ``maxcorr``   maximal correlation and aligned spectrum of a bipartite state
- ``bound``     the full copy-count parameter chain for a game shape
- ``compress``  run a strategy through the compression pipeline and compare
- ``evaluate``  exact strategy value, or a see-saw optimization
- ``selftest``  seeded invariant batteries over all library modules

Reports are JSON on stdout (serialized with :mod:`mesc.jsonio`, so identical
configuration and seed give byte-identical output); diagnostics go to stderr.
Exit codes: 0 success, 1 input/parse problem, 2 domain violation, 3 resource
cap.  The environment variable ``MESC_THREADS`` caps numba parallelism.
"""

from __future__ import annotations

import os
import sys

import click
import numpy as np

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from . import compression_pipeline as cp
from . import game_engine as ge
from . import jsonio
from . import operator_core as oc
from . import states
from . import superop


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def _diag(message: str) -> None:
    click.echo(message, err=True)


def _apply_thread_cap() -> None:
    raw = os.environ.get("MESC_THREADS", "").strip()
    if not raw:
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        _diag("ignoring MESC_THREADS=%r (not an integer)" % raw)
        return
    try:
        import numba
        numba.set_num_threads(n)
    except ImportError:
        pass


def _emit(doc: dict, out_path) -> None:
    text = jsonio.dumps(doc) + "\n"
    sys.stdout.write(text)
    sys.stdout.flush()
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _finish(builder, out_path, post_check=None) -> None:
    """Run a report builder under the exit-code contract and emit JSON.

    Exit 1: unreadable/invalid input files or configs.  Exit 2: inputs parse
    but violate a domain requirement.  Exit 3: a resource cap (desk-scale
    guard, net size, memory) was exceeded.
    """
    try:
        doc = builder()
    except jsonio.FormatError as exc:
        _diag("input error: %s" % exc)
        raise SystemExit(1)
    except tomllib.TOMLDecodeError as exc:
        _diag("config parse error: %s" % exc)
        raise SystemExit(1)
    except KeyError as exc:
        _diag("missing config key: %s" % exc)
        raise SystemExit(1)
    except OSError as exc:
        _diag("i/o error: %s" % exc)
        raise SystemExit(1)
    except (ge.CapExceeded, MemoryError) as exc:
        _diag("resource cap exceeded: %s" % exc)
        raise SystemExit(3)
    except ValueError as exc:
        _diag("domain error: %s" % exc)
        raise SystemExit(2)
    _emit(doc, out_path)
    if post_check is not None:
        code = post_check(doc)
        if code:
            raise SystemExit(code)


def _load_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return jsonio.loads(fh.read())


def _load_toml(path: str) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _parse_override_params(text) -> dict:
    """Parse ``--override-params d1=4,n0=16`` into an integer dict."""
    if not text:
        return {}
    out = {}
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise jsonio.FormatError(
                "override %r is not of the form key=value" % part)
        key, _, value = part.partition("=")
        try:
            out[key.strip()] = int(value.strip())
        except ValueError:
            raise jsonio.FormatError(
                "override value in %r is not an integer" % part)
    return out


def _merge_cli_params(params: cp.PipelineParams, seed, mc_samples,
                      cli_overrides: dict) -> cp.PipelineParams:
    """Re-run the parameter chain with command-line flags folded in."""
    if seed is None and mc_samples is None and not cli_overrides:
        return params
    merged = dict(params.overrides)
    merged.update(cli_overrides)
    return cp.compute_bound(
        params.delta, params.theta, params.rho, params.dims, params.constants,
        seed=params.seed if seed is None else int(seed),
        monte_carlo_N=(params.monte_carlo_N if mc_samples is None
                       else int(mc_samples)),
        overrides=merged)


def _profile_from_state(psi: np.ndarray, systems) -> states.NoisyMesProfile:
    if len(systems) != 2:
        raise jsonio.FormatError(
            "a shared state must be bipartite, got %d systems" % len(systems))
    return states.align_bases(psi, systems)


def _dims_from_table(table: dict) -> cp.GameDims:
    missing = [k for k in ("p", "q", "r", "s", "t", "a", "b")
               if k not in table]
    if missing:
        raise KeyError("dims.%s" % missing[0])
    return cp.GameDims(**{k: int(table[k])
                          for k in ("p", "q", "r", "s", "t", "a", "b")})


# ---------------------------------------------------------------------------
# command group
# ---------------------------------------------------------------------------

@click.group(name="mesc")
def cli():
    """Numerics for compressing strategies of fully quantum games."""
    _apply_thread_cap()


def main(argv=None) -> int:
    """Console entry point; returns the exit code instead of raising."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.exceptions.ClickException as exc:
        exc.show()
        return 1
    return 0


# ---------------------------------------------------------------------------
# maxcorr
# ---------------------------------------------------------------------------

@cli.command()
@click.argument("state_file")
@click.option("--out", "out_path", default=None,
              help="Also write the JSON report to this file.")
def maxcorr(state_file, out_path):
    """Maximal correlation of the bipartite state in STATE_FILE.

    The state must have maximally mixed marginals; the report carries the
    full aligned correlation spectrum (leading entry 1 for the identity
    pair, then the singular values in decreasing order).
    """
    def build():
        psi, systems = jsonio.state_from_doc(_load_json(state_file))
        profile = _profile_from_state(psi, systems)
        return {
            "command": "maxcorr",
            "seed": 0,
            "dims": {"s": profile.s_dim, "t": profile.t_dim},
            "rho": profile.rho,
            "spectrum": [float(c) for c in profile.spectrum],
            "alignment_residual": profile.alignment_residual(),
            "constants": {},
            "tolerances": {"marginal_tol": states.MARGINAL_TOL},
        }
    _finish(build, out_path)


# ---------------------------------------------------------------------------
# bound
# ---------------------------------------------------------------------------

TOY_PRESET = {"delta": 0.25, "theta": 0.25, "rho": 0.5,
              "dims": cp.GameDims(2, 2, 2, 2, 2, 2, 2)}


@cli.command()
@click.option("--config", "config_path", default=None,
              help="TOML file with [dims] and [params] tables.")
@click.option("--preset", default=None, type=click.Choice(["toy"]),
              help="Use a built-in parameter set instead of a config file.")
@click.option("--seed", default=None, type=int)
@click.option("--mc-samples", default=None, type=int)
@click.option("--override-params", default=None,
              help="Comma list like d1=4,n0=16,d2=4,n1=2,D=6.")
@click.option("--out", "out_path", default=None)
def bound(config_path, preset, seed, mc_samples, override_params, out_path):
    """Evaluate the full copy-count parameter chain.

    Prints every derived quantity (exact integers, possibly enormous),
    the symbolic formulas, the constants used, and the effective values
    after overrides.  The output is byte-identical across runs for the
    same inputs.
    """
    def build():
        cli_overrides = _parse_override_params(override_params)
        if preset == "toy":
            params = cp.compute_bound(
                TOY_PRESET["delta"], TOY_PRESET["theta"], TOY_PRESET["rho"],
                TOY_PRESET["dims"])
            source = "preset:toy"
        elif config_path is not None:
            config = _load_toml(config_path)
            dims = _dims_from_table(dict(config.get("dims", {})))
            ptable = dict(config.get("params", {}))
            if "rho" not in ptable and "rho_override" not in ptable:
                raise KeyError("params.rho")
            params = cp.params_from_config(config, dims,
                                           float(ptable.get("rho", 0.0)))
            source = "config"
        else:
            raise jsonio.FormatError("bound needs --config or --preset toy")
        params = _merge_cli_params(params, seed, mc_samples, cli_overrides)
        return {
            "command": "bound",
            "source": source,
            "seed": params.seed,
            "params": params.to_json_dict(),
            "constants": params.constants.as_dict(),
            "tolerances": {},
        }
    _finish(build, out_path)


# ---------------------------------------------------------------------------
# compress
# ---------------------------------------------------------------------------

@cli.command()
@click.argument("game_file")
@click.argument("strategy_file")
@click.option("--config", "config_path", required=True,
              help="TOML file with a [params] table (delta/theta or epsilon, "
                   "overrides, seed, monte_carlo_N).")
@click.option("--seed", default=None, type=int)
@click.option("--mc-samples", default=None, type=int)
@click.option("--override-params", default=None)
@click.option("--r-index", default=0, type=int,
              help="Referee basis element used to diagonalize the input.")
@click.option("--out", "out_path", default=None)
def compress(game_file, strategy_file, config_path, seed, mc_samples,
             override_params, r_index, out_path):
    """Compress the strategy in STRATEGY_FILE for the game in GAME_FILE.

    Runs the eight-stage pipeline at the configured parameters, checks the
    output channels are CPTP, and compares the game value before and
    after against the aggregation bound.  Desk-scale overrides are
    required; the certified parameter chain is astronomically large.
    """
    def build():
        game = jsonio.game_from_doc(_load_json(game_file))
        strategy, psi, psi_systems = jsonio.strategy_from_doc(
            _load_json(strategy_file))
        profile = _profile_from_state(psi, psi_systems)
        config = _load_toml(config_path)
        dims = game.game_dims(profile.s_dim, profile.t_dim)
        params = cp.params_from_config(config, dims, profile.rho)
        params = _merge_cli_params(params, seed, mc_samples,
                                   _parse_override_params(override_params))
        comparison = ge.compare_compression(game, profile, strategy, params,
                                            r_index=int(r_index))
        return {
            "command": "compress",
            "seed": params.seed,
            "copies_before": strategy.n_copies,
            "copies_after": comparison.pipeline.final_copies,
            "rho": profile.rho,
            "dims": dims.as_dict(),
            "passed": comparison.passed,
            "comparison": comparison.to_dict(),
            "constants": params.constants.as_dict(),
            "tolerances": {"cptp_tol": ge.CPTP_TOL,
                           "marginal_tol": states.MARGINAL_TOL,
                           "game_tol": ge.GAME_TOL},
        }
    _finish(build, out_path,
            post_check=lambda doc: 0 if doc["passed"] else 2)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

@cli.command()
@click.argument("game_file")
@click.argument("strategy", metavar="STRATEGY_FILE|optimize")
@click.option("--config", "config_path", default=None,
              help="TOML file; the [optimize] table sets epsilon, m, copies, "
                   "restarts, iters, dim_cap.")
@click.option("--seed", default=None, type=int)
@click.option("--out", "out_path", default=None)
def evaluate(game_file, strategy, config_path, seed, out_path):
    """Winning probability of a strategy, or a see-saw optimum.

    With a strategy file the value is computed exactly.  With the literal
    word ``optimize`` a see-saw search runs over a depolarized maximally
    entangled shared state; the report carries per-restart trajectories
    and is a heuristic lower bound, not a certificate.
    """
    def build():
        game = jsonio.game_from_doc(_load_json(game_file))
        tolerances = {"game_tol": ge.GAME_TOL, "cptp_tol": ge.CPTP_TOL}
        if strategy != "optimize":
            strat, psi, psi_systems = jsonio.strategy_from_doc(
                _load_json(strategy))
            profile = _profile_from_state(psi, psi_systems)
            value = ge.winning_probability(game, strat, profile)
            return {
                "command": "evaluate",
                "mode": "exact",
                "seed": 0,
                "copies": strat.n_copies,
                "rho": profile.rho,
                "value": value,
                "constants": {},
                "tolerances": tolerances,
            }
        table = {}
        if config_path is not None:
            table = dict(_load_toml(config_path).get("optimize", {}))
        epsilon = float(table.get("epsilon", 0.25))
        m = int(table.get("m", 2))
        copies = int(table.get("copies", 1))
        restarts = int(table.get("restarts", 4))
        iters = int(table.get("iters", 60))
        dim_cap = int(table.get("dim_cap", ge.DIM_CAP))
        used_seed = int(table.get("seed", 0) if seed is None else seed)
        profile = states.depolarized_mes(m, epsilon)
        _, report = ge.optimize_value_seesaw(game, profile, copies,
                                             restarts=restarts, iters=iters,
                                             seed=used_seed, dim_cap=dim_cap)
        return {
            "command": "evaluate",
            "mode": "optimize",
            "seed": used_seed,
            "copies": copies,
            "shared_state": {"m": m, "epsilon": epsilon, "rho": profile.rho},
            "value": report.value,
            "report": report.to_dict(),
            "constants": {},
            "tolerances": tolerances,
        }
    _finish(build, out_path)


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def _suite_fourier(seed: int) -> dict:
    """Parseval, round-trip, influence and depolarization identities."""
    gen = np.random.default_rng([seed, 1])
    worst = 0.0
    checks = 0
    for trial in range(8):
        dims = tuple(int(d) for d in gen.integers(2, 4, size=2))
        bases = [oc.make_standard_basis(d) for d in dims]
        total = int(np.prod(dims))
        h = gen.normal(size=(total, total)) + 1j * gen.normal(size=(total,
                                                                    total))
        h = (h + h.conj().T) / 2.0
        coeffs = oc.fourier_coefficient_tensor(h, bases)
        back = oc.fourier_synthesize(coeffs, bases)
        worst = max(worst, float(np.max(np.abs(back - h))))
        norm_sq = float(np.real(np.trace(h.conj().T @ h))) / total
        worst = max(worst, abs(float(np.sum(coeffs ** 2)) - norm_sq))
        gamma = float(gen.uniform(0.1, 0.9))
        smoothed = oc.depolarize(h, bases, gamma)
        sm_coeffs = oc.fourier_coefficient_tensor(smoothed, bases)
        for sigma in np.ndindex(coeffs.shape):
            weight = sum(1 for s in sigma if s != 0)
            worst = max(worst, abs(sm_coeffs[sigma]
                                   - gamma ** weight * coeffs[sigma]))
        infl = oc.influences(h, bases)
        for k in range(len(dims)):
            by_def = 0.0
            for sigma in np.ndindex(coeffs.shape):
                if sigma[k] != 0:
                    by_def += float(coeffs[sigma]) ** 2
            worst = max(worst, abs(float(infl[k]) - by_def))
        checks += 4
    return {"checks": checks, "worst_residual": worst, "tolerance": 1e-10,
            "passed": worst <= 1e-10}


def _suite_channels(seed: int) -> dict:
    """Choi round-trips, CPTP verdicts, and the rounding construction."""
    gen = np.random.default_rng([seed, 2])
    worst = 0.0
    checks = 0
    for trial in range(6):
        din = int(gen.integers(2, 4))
        dout = int(gen.integers(2, 4))
        ch = superop.random_cptp((din,), (dout,), gen)
        back = superop.map_from_choi(ch.choi_adjoint)
        probe = gen.normal(size=(din, din)) + 1j * gen.normal(size=(din, din))
        worst = max(worst, float(np.max(np.abs(ch.apply(probe)
                                               - back.apply(probe)))))
        rep = superop.is_cptp(ch)
        if not rep["verdict"]:
            worst = max(worst, 1.0)
        checks += 2
    transpose = superop.ChannelMap.from_apply(lambda x: x.T, (2,), (2,))
    rep = superop.is_cptp(transpose)
    ok_transpose = (not rep["verdict"]) and rep["min_choi_eig"] <= -0.1
    checks += 1
    # perturb a random Choi and round it back onto the channel set
    ch = superop.random_cptp((2,), (2,), gen)
    noise = gen.normal(size=(4, 4)) + 1j * gen.normal(size=(4, 4))
    noise = (noise + noise.conj().T) / 2.0
    noise *= 0.01 / max(float(np.linalg.norm(noise)), 1e-30)
    bumped = superop.ChoiMatrix(ch.choi_adjoint.matrix + noise,
                                ch.choi_adjoint.out_dims,
                                ch.choi_adjoint.in_dims, validate=False)
    rounded, _rep = cp.step_round(bumped)
    verdict = superop.is_cptp(superop.ChannelMap(rounded.out_dims,
                                                 rounded.in_dims, rounded))
    round_resid = max(-verdict["min_choi_eig"], verdict["marginal_residual"])
    worst = max(worst, round_resid)
    checks += 1
    return {"checks": checks, "worst_residual": worst,
            "transpose_rejected": ok_transpose, "tolerance": 1e-9,
            "passed": ok_transpose and worst <= 1e-9}


def _suite_states(seed: int) -> dict:
    """Maximal correlation of depolarized and product states."""
    worst = 0.0
    checks = 0
    for m in (2, 3):
        for eps in (0.0, 0.1, 0.25, 0.5, 1.0):
            profile = states.depolarized_mes(m, eps)
            worst = max(worst, abs(profile.rho - (1.0 - eps)))
            worst = max(worst, profile.alignment_residual())
            checks += 2
    product = np.eye(4) / 4.0
    worst = max(worst, abs(states.maximal_correlation(product, (2, 2))))
    checks += 1
    return {"checks": checks, "worst_residual": worst, "tolerance": 1e-8,
            "passed": worst <= 1e-8}


def _suite_gaussian(seed: int) -> dict:
    """Monte Carlo second moments of seeded polynomial ensembles."""
    import mesc.gaussian_analysis as ga
    gen = np.random.default_rng([seed, 3])
    sampler = ga.GaussianSampler(seed)
    worst = 0.0
    checks = 0
    for trial in range(4):
        n = 6
        coeffs = {}
        for _ in range(5):
            size = int(gen.integers(1, 4))
            key = tuple(sorted(gen.choice(n, size=size, replace=False)))
            coeffs[key] = float(gen.normal())
        poly = ga.MultilinearPolynomial(n, coeffs)
        exact = sum(c * c for c in coeffs.values())
        batch = sampler.sample((40000, n))
        values = poly.evaluate(batch)
        mc = float(np.mean(values ** 2))
        se = float(np.std(values ** 2)) / np.sqrt(len(values))
        worst = max(worst, (abs(mc - exact) - 5.0 * se) / max(exact, 1e-12))
        checks += 1
    return {"checks": checks, "worst_excess": max(worst, 0.0),
            "tolerance": 0.0, "passed": worst <= 0.0}


def _suite_pipeline(seed: int) -> dict:
    """Exact toy parameter chain and a tiny end-to-end run."""
    dims = cp.GameDims(2, 2, 2, 2, 2, 2, 2)
    a = cp.compute_bound(0.25, 0.25, 0.5, dims)
    b = cp.compute_bound(0.25, 0.25, 0.5, dims)
    deterministic = (a.to_json_dict() == b.to_json_dict()
                     and jsonio.dumps(a.to_json_dict())
                     == jsonio.dumps(b.to_json_dict()))
    chain_ok = (a.d1 == 512 and a.h_cap == 8192 and a.n1 == 2 ** 34
                and a.total_copies == a.h_cap + a.n0 * a.n1
                and a.recomputed_consistent())
    profile = states.depolarized_mes(2, 0.25)
    game = ge.FullyQuantumGame(np.array([[1.0]]), np.eye(4), 1, 1, 1, 2, 2)
    params = cp.compute_bound(0.3, 0.2, profile.rho, game.game_dims(2),
                              seed=seed, monte_carlo_N=1500,
                              overrides={"d1": 2, "n0": 4, "d2": 2,
                                         "n1": 1, "D": 1})
    ident = superop.ChannelMap.from_apply(lambda x: x.copy(), (2, 1), (2,))
    strategy = ge.Strategy(1, ident, ident)
    _, report = cp.run_pipeline(strategy, game, profile, params)
    cptp_ok = report.cptp_m["verdict"] and report.cptp_n["verdict"]
    return {"checks": 4, "chain_exact": chain_ok,
            "deterministic": deterministic,
            "pipeline_passed": report.passed, "final_cptp": bool(cptp_ok),
            "total_deviation": report.total_deviation,
            "passed": bool(deterministic and chain_ok and report.passed
                           and cptp_ok)}


def _suite_games(seed: int) -> dict:
    """Trivial game values, factorization, and a see-saw sanity point."""
    profile = states.depolarized_mes(2, 0.25)
    worst = 0.0
    gen = np.random.default_rng([seed, 4])
    for n in (0, 1):
        game = ge.FullyQuantumGame(np.eye(4) / 4.0, np.eye(8), 2, 2, 2, 2, 2)
        alice = superop.random_cptp((2,) * n + (2,), (2,), gen)
        bob = superop.random_cptp((2,) * n + (2,), (2,), gen)
        value = ge.winning_probability(game, ge.Strategy(n, alice, bob),
                                       profile)
        worst = max(worst, abs(value - 1.0))
    game = ge.FullyQuantumGame(np.array([[1.0]]), np.diag([1.0, 0, 0, 0]),
                               1, 1, 1, 2, 2)
    _, report = ge.optimize_value_seesaw(game, profile, 0, restarts=2,
                                         iters=25, seed=seed)
    seesaw_ok = report.value >= 1.0 - 1e-6
    return {"checks": 3, "worst_residual": worst, "tolerance": 1e-10,
            "seesaw_value": report.value,
            "passed": worst <= 1e-10 and seesaw_ok}


_SUITES = {
    "fourier": _suite_fourier,
    "channels": _suite_channels,
    "states": _suite_states,
    "gaussian": _suite_gaussian,
    "pipeline": _suite_pipeline,
    "games": _suite_games,
}


@cli.command()
@click.option("--suite", default="all",
              type=click.Choice(["all"] + sorted(_SUITES)))
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_path", default=None)
def selftest(suite, seed, out_path):
    """Run seeded invariant batteries; exit 2 if any suite fails."""
    def build():
        names = sorted(_SUITES) if suite == "all" else [suite]
        results = {}
        for name in names:
            results[name] = _SUITES[name](int(seed))
        return {
            "command": "selftest",
            "seed": int(seed),
            "suites": results,
            "passed": all(r["passed"] for r in results.values()),
            "constants": cp.PipelineConstants().as_dict(),
            "tolerances": {"cptp_tol": ge.CPTP_TOL,
                           "game_tol": ge.GAME_TOL,
                           "marginal_tol": states.MARGINAL_TOL},
        }
    _finish(build, out_path,
            post_check=lambda doc: 0 if doc["passed"] else 2)


if __name__ == "__main__":
    sys.exit(main())
