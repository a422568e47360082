"""Numerical toolkit for compressing strategies of fully quantum nonlocal games
played on many copies of a noisy maximally entangled state.

The package is organised around the objects the compression argument
manipulates:

- ``operator_core``: Hermitian operators on tensor products of small systems,
  orthonormal Hermitian bases, Fourier coefficients, degree/influence/
  depolarization machinery and the ``zeta`` defect functional.
- ``superop``: linear maps between operator spaces, adjoints, Choi matrices
  (stored for the adjoint map), CPTP verdicts and slice decompositions.
- ``states``: noisy maximally entangled states, maximal correlation, aligned
  bases, and diagonalization of the referee's input state.
- ``gaussian_analysis``: Hermite expansions, Ornstein-Uhlenbeck smoothing,
  multilinearization, correlated Gaussian sampling and random operators.
- ``compression_pipeline``: the eight-stage strategy compression pipeline with
  per-stage measured reports, plus the theoretical parameter chain.
- ``game_engine``: game values, correlation tables, see-saw optimization,
  brute-force bracketing and before/after comparison of compressed strategies.
- ``jsonio``: deterministic JSON documents for operators, states, channels,
  polynomials, games and strategies.
- ``cli``: the ``mesc`` command line tool.
"""

__version__ = "0.1.0"

__all__ = [
    "operator_core",
    "superop",
    "states",
    "gaussian_analysis",
    "compression_pipeline",
    "game_engine",
    "jsonio",
    "cli",
]
