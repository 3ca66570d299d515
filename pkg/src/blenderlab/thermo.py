"""Pressure, similarity dimension and Gibbs cylinder weights.

Works with both :class:`~blenderlab.affine_ifs.AffineIfsFamily` (where
``Lambda`` of a word is the exact product of slopes) and
:class:`~blenderlab.skewprod.FiberSystem` (grid maximum of the eigenvalue
product).  Sums over words go through a shift by the maximum and
:func:`math.fsum`, so results do not depend on summation order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .affine_ifs import AffineIfsFamily
from .errors import ContractError, NumericError, ResourceCapError
from .skewprod import FiberSystem, log_lambda_table
from .symbolic import DEFAULT_ENUMERATION_CAP, FiniteWord, word_array

DEFAULT_TOL = 1e-9
AFFINE_DEPTHS = (1,)
FIBER_DEPTHS = (4, 6, 8)
# words x grid points allowed per depth when picking default depths
DEPTH_BUDGET = 2_000_000


def is_affine(system) -> bool:
    return isinstance(system, AffineIfsFamily) or (
        isinstance(system, FiberSystem) and system.meta.get("affine", False)
    )


def log_lambda_words(system, p, n: int, fiber_addr=(), cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """``log Lambda_alpha`` for all words of length ``n`` in lexicographic order."""
    k = system.alphabet.size
    if k**n > cap:
        raise ResourceCapError(f"{k ** n} words requested, enumeration cap is {cap}")
    if isinstance(system, AffineIfsFamily):
        logs = system.log_slopes(p).reshape(-1)
        if n == 0:
            return np.zeros(1)
        return logs[word_array(k, n, cap)].sum(axis=1)
    if isinstance(system, FiberSystem):
        per_axis = system.meta.get("lambda_grid")
        lo, _ = log_lambda_table(system, p, fiber_addr, n, per_axis=per_axis, cap=cap)
        return lo
    raise ContractError(f"unsupported system type {type(system).__name__}")


def _logsumexp(values: np.ndarray) -> float:
    m = float(np.max(values))
    if not np.isfinite(m):
        return m
    return m + math.log(math.fsum(np.exp(values - m)))


def partition_sum(system, p, s: float, n: int, fiber_addr=()) -> float:
    """``Z_n(s) = sum over words of length n of Lambda**s``."""
    return math.exp(_logsumexp(s * log_lambda_words(system, p, n, fiber_addr)))


def default_depths(system) -> tuple:
    if is_affine(system):
        return AFFINE_DEPTHS
    k = system.alphabet.size
    per_axis = system.meta.get("lambda_grid")
    if per_axis is None:
        per_axis = 33 if system.fiber_dim <= 2 else max(3, int(round(33 ** (2.0 / system.fiber_dim))))
    G = per_axis**system.fiber_dim
    depths = tuple(n for n in FIBER_DEPTHS if k**n * G <= DEPTH_BUDGET)
    if not depths:
        n = 1
        while k ** (n + 1) * G <= DEPTH_BUDGET:
            n += 1
        depths = (n,)
    return depths


@dataclass
class PressureCurve:
    s_grid: np.ndarray
    depths: tuple
    values: np.ndarray  # (len(depths), len(s_grid))
    extrapolated: np.ndarray
    spread: np.ndarray  # gap between the two largest depths, per s

    def to_dict(self):
        return {
            "s_grid": [float(v) for v in self.s_grid],
            "depths": list(self.depths),
            "values": [[float(v) for v in row] for row in self.values],
            "extrapolated": [float(v) for v in self.extrapolated],
            "spread": [float(v) for v in self.spread],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s"] + [f"depth_{n}" for n in self.depths] + ["extrapolated", "spread"])
        for j, s in enumerate(self.s_grid):
            row = [s] + [self.values[i, j] for i in range(len(self.depths))] + [self.extrapolated[j], self.spread[j]]
            w.writerow([fmt(v) for v in row])
        return buf.getvalue()


def fmt(v) -> str:
    """17 significant digits, the CSV convention of the package."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


class _PressureEvaluator:
    """Caches per-depth ``log Lambda`` arrays so pressure costs one pass per ``s``."""

    def __init__(self, system, p, depths, fiber_addr=()):
        self.depths = tuple(int(n) for n in depths)
        if not self.depths or any(n < 1 for n in self.depths) or list(self.depths) != sorted(set(self.depths)):
            raise ContractError("depths must be a nonempty increasing list of positive integers")
        self.logs = [log_lambda_words(system, p, n, fiber_addr) for n in self.depths]

    def per_depth(self, s: float) -> np.ndarray:
        return np.array([_logsumexp(s * L) / n for L, n in zip(self.logs, self.depths)])

    def __call__(self, s: float) -> float:
        return float(self.per_depth(s).min())


def pressure_curve(system, p, s_grid, depths=None, fiber_addr=()) -> PressureCurve:
    """Per-depth pressure estimates and their minimum (an upper bound of the limit)."""
    depths = default_depths(system) if depths is None else depths
    ev = _PressureEvaluator(system, p, depths, fiber_addr)
    s_grid = np.asarray(s_grid, dtype=float)
    if np.any(s_grid < 0):
        raise ContractError("pressure is evaluated at s >= 0")
    values = np.stack([ev.per_depth(s) for s in s_grid], axis=1)
    extrap = values.min(axis=0)
    spread = np.abs(values[-1] - values[-2]) if len(ev.depths) > 1 else np.zeros(len(s_grid))
    return PressureCurve(s_grid, ev.depths, values, extrap, spread)


def gamma_hi(system) -> float:
    return system.gamma_bounds[1]


def similarity_dimension(system, p, tol: float = DEFAULT_TOL, depths=None, fiber_addr=()) -> float:
    """The zero of the extrapolated pressure, by bisection."""
    if tol <= 0:
        raise ContractError("tolerance must be positive")
    depths = default_depths(system) if depths is None else depths
    ev = _PressureEvaluator(system, p, depths, fiber_addr)
    k = system.alphabet.size
    lo, hi = 0.0, math.log(k) / -math.log(gamma_hi(system)) + 1.0
    f_lo = ev(lo)
    if not f_lo > 0:
        raise NumericError(f"pressure at s=0 is {f_lo}, expected log k > 0")
    for _ in range(8):
        if ev(hi) < 0:
            break
        hi *= 2.0
    else:
        raise NumericError("could not bracket the zero of the pressure")
    while hi - lo > tol / 4:
        mid = 0.5 * (lo + hi)
        if ev(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class GibbsApprox:
    """Per-level normalized cylinder weights ``Lambda_rho**Delta / Z``."""

    depth: int
    k: int
    weights: np.ndarray  # lexicographic order over words of length depth
    exponent: float
    base_fiber: tuple
    log_normalizer: float
    p0: tuple = ()
    provenance: dict = field(default_factory=dict)

    def weight(self, word: FiniteWord) -> float:
        if len(word) != self.depth:
            raise ContractError("word length does not match the Gibbs depth")
        idx = 0
        for a in word.letters:
            idx = idx * self.k + a
        return float(self.weights[idx])

    def to_dict(self):
        return {
            "depth": self.depth,
            "k": self.k,
            "exponent": self.exponent,
            "base_fiber": list(self.base_fiber),
            "log_normalizer": self.log_normalizer,
            "p0": list(self.p0),
            "weights": [float(w) for w in self.weights],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["word", "weight"])
        words = word_array(self.k, self.depth)
        for row, wt in zip(words, self.weights):
            w.writerow(["-".join(str(a) for a in row), fmt(wt)])
        return buf.getvalue()


def gibbs_weights(system, p0, depth: int, fiber_addr=(), delta: float | None = None, tol: float = DEFAULT_TOL) -> GibbsApprox:
    """Cylinder weights at ``depth`` for the exponent ``Delta(p0)``."""
    if delta is None:
        delta = similarity_dimension(system, p0, tol, fiber_addr=fiber_addr)
    logs = log_lambda_words(system, p0, depth, fiber_addr)
    L = delta * logs
    logz = _logsumexp(L)
    w = np.exp(L - logz)
    w = w / math.fsum(w)
    p0 = tuple(float(v) for v in np.asarray(p0, dtype=float).reshape(-1))
    return GibbsApprox(depth, system.alphabet.size, w, float(delta), tuple(fiber_addr or ()), float(logz), p0)


def quasi_multiplicativity(system, p0, depth: int, fiber_addr=(), delta: float | None = None) -> float:
    """``C`` with ``Lambda_{rho rho'}**D / (Lambda_rho**D Lambda_rho'**D)`` in ``[1/C, C]``.

    Taken over every split of every word of length ``depth``.
    """
    if depth < 2:
        raise ContractError("quasi-multiplicativity needs depth >= 2")
    if delta is None:
        delta = similarity_dimension(system, p0, fiber_addr=fiber_addr)
    k = system.alphabet.size
    full = log_lambda_words(system, p0, depth, fiber_addr)
    logs = {m: log_lambda_words(system, p0, m, fiber_addr) for m in range(1, depth)}
    worst = 0.0
    idx = np.arange(k**depth)
    for m in range(1, depth):
        far = idx // k ** (depth - m)  # rho, farther from the origin
        near = idx % k ** (depth - m)  # rho'
        q = delta * (full - logs[m][far] - logs[depth - m][near])
        worst = max(worst, float(np.abs(q).max()))
    return math.exp(worst)


def sample_words(gibbs: GibbsApprox, n_draws: int, seed: int, cell: int = 0) -> np.ndarray:
    """Draw ``n_draws`` words (rows, reading order) from the weights."""
    g = rngmod.stream(seed, rngmod.ATOMS, cell)
    cdf = np.cumsum(gibbs.weights)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, g.random(n_draws), side="right")
    idx = np.minimum(idx, len(cdf) - 1)
    powers = gibbs.k ** np.arange(gibbs.depth - 1, -1, -1, dtype=np.int64)
    return (idx[:, None] // powers[None, :]) % gibbs.k


def sample_word(gibbs: GibbsApprox, seed: int) -> FiniteWord:
    return FiniteWord.backward(sample_words(gibbs, 1, seed)[0])
