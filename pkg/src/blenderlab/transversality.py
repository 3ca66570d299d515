"""Empirical checks of transversality and of the density-integral bound.

A pair of coded points ``pi_p(alpha)``, ``pi_p(beta)`` with different last
letters is transversal when the parameter-measure of
``{p : |pi_p(alpha) - pi_p(beta)| < r}`` is ``O(r^N)``.  The scans here
estimate that measure on a parameter grid or by Monte Carlo and report the
ratio to ``r^N`` across radius decades.
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
from .errors import ContractError, PrecisionError
from .measure_lab import ball_volume, fiber_dim
from .skewprod import _poly_constant, code_batch as fiber_code_batch
from .symbolic import pair_stratum, FiniteWord
from .thermo import GibbsApprox, fmt, log_lambda_words, sample_words, similarity_dimension

CHUNK_ROWS = 200_000


def truncation_bound(system, depth: int) -> float:
    """Upper bound on the distance between a coded point and its depth-``depth`` truncation."""
    g = system.gamma_bounds[1]
    if isinstance(system, AffineIfsFamily):
        return system.diameter * g**depth
    return _poly_constant(system) * max(depth, 1) ** system.fiber_dim * g**depth


def auto_coding_depth(system, r_min: float, max_depth: int = 200) -> int:
    """Smallest depth whose pairwise truncation error is at most ``r_min / 10``."""
    for n in range(1, max_depth + 1):
        if 2.0 * truncation_bound(system, n) <= r_min / 10:
            return n
    raise PrecisionError(f"no coding depth up to {max_depth} reaches truncation error {r_min / 10:.3g}")


def code_rows(system, p_rows, words, fiber_addr=()) -> np.ndarray:
    """Coded points ``(M, N)`` with one parameter row per word row."""
    if isinstance(system, AffineIfsFamily):
        return system.code_batch(p_rows, words)[:, None]
    return fiber_code_batch(system, p_rows, fiber_addr, words)


def _box_volume(box: np.ndarray) -> float:
    # degenerate directions count with measure one so p-independent systems still work
    w = box[:, 1] - box[:, 0]
    return float(np.prod(np.where(w > 0, w, 1.0)))


@dataclass(frozen=True)
class Sampler:
    """Parameter sampling: ``grid`` (one parameter) or ``mc``; ``count`` points."""

    method: str = "auto"
    count: int | None = None
    seed: int = 0

    def resolve(self, d: int) -> "Sampler":
        method = self.method
        if method == "auto":
            method = "grid" if d == 1 else "mc"
        if method not in ("grid", "mc"):
            raise ContractError(f"unknown sampler method {method!r}")
        count = self.count or (10_000 if method == "grid" else 100_000)
        return Sampler(method, count, self.seed)

    def points(self, box: np.ndarray) -> np.ndarray:
        s = self.resolve(box.shape[0])
        if s.method == "grid":
            if box.shape[0] != 1:
                raise ContractError("grid sampling is for one parameter")
            t = (np.arange(s.count) + 0.5) / s.count
            return (box[0, 0] + t * (box[0, 1] - box[0, 0]))[:, None]
        g = rngmod.stream(s.seed, rngmod.PARAMS)
        return box[:, 0] + g.random((s.count, box.shape[0])) * (box[:, 1] - box[:, 0])

    def to_dict(self):
        return {"method": self.method, "count": self.count, "seed": self.seed}


@dataclass(frozen=True)
class PairSpec:
    """Random pairs with differing last letters, coded to ``coding_depth`` letters."""

    n_pairs: int = 50
    seed: int = 0
    coding_depth: int | None = None
    last_letters: tuple | None = None  # optional fixed (a, b) for the last letters


def random_pairs(k: int, spec: PairSpec, depth: int) -> tuple[np.ndarray, np.ndarray]:
    g = rngmod.stream(spec.seed, rngmod.PAIRS)
    A = g.integers(0, k, (spec.n_pairs, depth))
    B = g.integers(0, k, (spec.n_pairs, depth))
    if spec.last_letters is not None:
        A[:, -1], B[:, -1] = spec.last_letters
    else:
        shift = g.integers(1, k, spec.n_pairs)
        B[:, -1] = (A[:, -1] + shift) % k
    if np.any(A[:, -1] == B[:, -1]):
        raise ContractError("pairs must have different last letters")
    return A, B


def pair_distances(system, P: np.ndarray, A: np.ndarray, B: np.ndarray, fiber_addr=()) -> np.ndarray:
    """``|pi_p(A_i) - pi_p(B_i)|`` for every pair ``i`` and sampled parameter ``p``, shape ``(pairs, P)``."""
    n_pairs, n_p = A.shape[0], P.shape[0]
    out = np.empty((n_pairs, n_p))
    per = max(1, CHUNK_ROWS // n_p)
    for s in range(0, n_pairs, per):
        a, b = A[s : s + per], B[s : s + per]
        m = a.shape[0]
        pp = np.tile(P, (m, 1))
        xa = code_rows(system, pp, np.repeat(a, n_p, axis=0), fiber_addr)
        xb = code_rows(system, pp, np.repeat(b, n_p, axis=0), fiber_addr)
        out[s : s + m] = np.linalg.norm(xa - xb, axis=1).reshape(m, n_p)
    return out


@dataclass
class TransversalityScan:
    radii: np.ndarray
    pairs: list  # (alpha, beta, fiber_addr) as lists of letters
    measure_estimates: np.ndarray  # (pairs, radii)
    C_per_radius: np.ndarray
    C_hat: float
    verdict: str
    sampler: dict
    coding_depth: int
    n_dim: int
    box_volume: float
    decades: list = field(default_factory=list)

    def to_dict(self):
        return {
            "radii": [float(r) for r in self.radii],
            "C_per_radius": [float(c) for c in self.C_per_radius],
            "C_hat": self.C_hat,
            "verdict": self.verdict,
            "sampler": self.sampler,
            "coding_depth": self.coding_depth,
            "n_pairs": len(self.pairs),
            "per_decade": self.decades,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair", "r", "estimate"])
        for i in range(len(self.pairs)):
            for j, r in enumerate(self.radii):
                w.writerow([i, fmt(r), fmt(self.measure_estimates[i, j])])
        return buf.getvalue()


def _decade_table(radii: np.ndarray, C: np.ndarray) -> list:
    top = radii[0]
    buckets: dict[int, float] = {}
    for r, c in zip(radii, C):
        key = int(math.floor(math.log10(top / r) + 1e-9))
        buckets[key] = max(buckets.get(key, 0.0), float(c))
    return [{"decade": k, "r_max": float(top / 10**k), "C": v} for k, v in sorted(buckets.items())]


def _stable(values, factor: float = 2.0) -> bool:
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        return False
    if np.all(values == 0):
        return True
    if np.any(values == 0):
        return False
    return bool(values.max() / values.min() <= factor)


def scan_transversality(system, pairs_spec: PairSpec, radii, sampler: Sampler = Sampler(), fiber_addr=()) -> TransversalityScan:
    """Parameter-measure of near-collisions for random pairs, per radius.

    ``C_hat`` is the sup of ``estimate / r^N``.  A pair whose positive
    estimate does not shrink across the radius range makes ``C_hat``
    infinite.  The verdict is ``plausible-(T)`` when the per-radius sups in
    the top two decades agree within a factor of 2.
    """
    radii = np.sort(np.asarray(radii, dtype=float))[::-1]
    if radii.size == 0 or np.any(radii <= 0):
        raise ContractError("radii must be positive")
    N = fiber_dim(system)
    depth = pairs_spec.coding_depth or auto_coding_depth(system, radii[-1])
    err = 2.0 * truncation_bound(system, depth)
    if err > radii[-1] / 10:
        raise PrecisionError(f"coding depth {depth} leaves truncation error {err:.3g} above r/10 = {radii[-1] / 10:.3g}")
    A, B = random_pairs(system.alphabet.size, pairs_spec, depth)
    box = system.parameter_box
    P = sampler.points(box)
    vol = _box_volume(box)
    dist = pair_distances(system, P, A, B, fiber_addr)
    est = np.stack([(dist < r).mean(axis=1) * vol for r in radii], axis=1)
    C = (est / radii**N).max(axis=0)
    stuck = (est[:, -1] > 0) & (est[:, -1] >= est[:, 0]) if len(radii) > 1 else np.zeros(len(est), bool)
    C_hat = math.inf if stuck.any() else float(C.max())
    decades = _decade_table(radii, C)
    top = [d["C"] for d in decades[:2]]
    verdict = "plausible-(T)" if math.isfinite(C_hat) and _stable(top) else "fails-(T)"
    pairs = [(a.tolist(), b.tolist(), list(fiber_addr or ())) for a, b in zip(A, B)]
    return TransversalityScan(radii, pairs, est, C, C_hat, verdict, sampler.resolve(box.shape[0]).to_dict(), depth, N, vol, decades)


# stratified bound --------------------------------------------------------------


def local_box(system, p0, delta: float) -> np.ndarray:
    p0 = np.asarray(p0, dtype=float).reshape(-1)
    box = system.parameter_box
    lo, hi = p0 - delta, p0 + delta
    degenerate = box[:, 1] == box[:, 0]
    lo = np.where(degenerate, box[:, 0], lo)
    hi = np.where(degenerate, box[:, 1], hi)
    if np.any(lo < box[:, 0] - 1e-12) or np.any(hi > box[:, 1] + 1e-12):
        raise ContractError("the ball B(p0, delta) must lie inside the parameter box")
    return np.stack([lo, hi], axis=1)


@dataclass
class StratumRow:
    n: int
    rho: list
    r: float
    estimate: float
    log_lambda: float
    bound: float
    ratio: float


@dataclass
class StratifiedReport:
    rows: list
    epsilon: float
    exponent: float
    dimension: float
    sup_by_depth: dict

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "exponent": self.exponent,
            "dimension": self.dimension,
            "sup_by_depth": {str(k): v for k, v in self.sup_by_depth.items()},
            "rows": [vars(r) for r in self.rows],
        }


def stratified_bound_check(
    system,
    p0,
    delta: float,
    epsilon: float | None = None,
    n_max: int = 6,
    sampler: Sampler = Sampler(count=2000),
    radii=(1e-3,),
    n_strata: int = 4,
    n_pairs: int = 8,
    seed: int = 0,
    fiber_addr=(),
) -> StratifiedReport:
    """Estimate over ``B(p0, delta)`` divided by ``r^N Lambda_rho**(-exponent)`` per stratum.

    The exponent is ``1 + eps/2`` for affine families and ``N + 2 eps/3``
    for fiber systems.  Pairs in stratum ``rho`` share the ``|rho|``
    letters nearest the origin and differ at the next one.
    """
    N = fiber_dim(system)
    box = local_box(system, p0, delta)
    dim = similarity_dimension(system, p0, fiber_addr=fiber_addr)
    if epsilon is None:
        epsilon = (dim - N) / 2
    if epsilon <= 0 or dim <= N + epsilon:
        raise ContractError(f"need dimension > N + epsilon, got dimension {dim:.6g}, N = {N}, epsilon = {epsilon:.3g}")
    exponent = 1 + epsilon / 2 if isinstance(system, AffineIfsFamily) else N + 2 * epsilon / 3
    radii = np.asarray(radii, dtype=float)
    k = system.alphabet.size
    P = sampler.points(box)
    vol = _box_volume(box)
    g = rngmod.stream(seed, rngmod.CHECKS)
    rows, sup = [], {}
    for n in range(n_max + 1):
        logs = log_lambda_words(system, p0, n, fiber_addr) if n else np.zeros(1)
        strata = g.integers(0, k, (n_strata, n)) if n else np.zeros((1, 0), dtype=np.int64)
        for rho in strata:
            idx = int(np.dot(rho, k ** np.arange(n - 1, -1, -1))) if n else 0
            log_lam = float(logs[idx])
            depth = n + auto_coding_depth(system, float(radii.min()) * math.exp(-log_lam) if n else float(radii.min()))
            tails_a = g.integers(0, k, (n_pairs, depth - n))
            tails_b = g.integers(0, k, (n_pairs, depth - n))
            tails_b[:, -1] = (tails_a[:, -1] + g.integers(1, k, n_pairs)) % k
            A = np.concatenate([tails_a, np.broadcast_to(rho, (n_pairs, n))], axis=1)
            B = np.concatenate([tails_b, np.broadcast_to(rho, (n_pairs, n))], axis=1)
            dist = pair_distances(system, P, A, B, fiber_addr)
            for r in radii:
                est = float((dist < r).mean(axis=1).max() * vol)
                bound = r**N * math.exp(-exponent * log_lam)
                ratio = est / bound
                rows.append(StratumRow(n, [int(a) for a in rho], float(r), est, log_lam, bound, ratio))
                sup[n] = max(sup.get(n, 0.0), ratio)
    return StratifiedReport(rows, float(epsilon), float(exponent), dim, sup)


def affine_scaling_residuals(family: AffineIfsFamily, n_instances: int = 1000, seed: int = 0, max_rho: int = 6, tail: int = 12) -> np.ndarray:
    """``| |pi(rho a) - pi(rho b)| - Lambda_rho |pi(a) - pi(b)| |`` on random instances."""
    if not isinstance(family, AffineIfsFamily):
        raise ContractError("the scaling identity holds for affine families only")
    g = rngmod.stream(seed, rngmod.CHECKS)
    k = family.k
    box = family.parameter_box
    P = box[:, 0] + g.random((n_instances, box.shape[0])) * (box[:, 1] - box[:, 0])
    n = g.integers(0, max_rho + 1, n_instances)
    out = np.empty(n_instances)
    for i in range(n_instances):
        rho = g.integers(0, k, n[i])
        a, b = g.integers(0, k, tail), g.integers(0, k, tail)
        b[-1] = (a[-1] + 1 + g.integers(0, k - 1)) % k
        pa = family.code_batch(P[i], np.concatenate([a, rho]))
        pb = family.code_batch(P[i], np.concatenate([b, rho]))
        lam = math.exp(float(family.log_slopes(P[i]).reshape(-1)[rho].sum()))
        out[i] = abs(abs(pa - pb) - lam * abs(family.code_batch(P[i], a) - family.code_batch(P[i], b)))
    return out


# density integral --------------------------------------------------------------


@dataclass
class DensityIntegralReport:
    radii: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    reliable: np.ndarray
    value: float
    growth_per_decade: float
    stable: bool
    singular: bool
    stratum_check: dict
    provenance: dict

    def to_dict(self):
        return {
            "radii": [float(r) for r in self.radii],
            "values": [float(v) for v in self.values],
            "std_errors": [float(v) for v in self.std_errors],
            "reliable": [bool(b) for b in self.reliable],
            "value": self.value,
            "growth_per_decade": self.growth_per_decade,
            "stable": self.stable,
            "singular": self.singular,
            "stratum_check": self.stratum_check,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r", "value", "std_error", "reliable"])
        for r, v, s, ok in zip(self.radii, self.values, self.std_errors, self.reliable):
            w.writerow([fmt(r), fmt(v), fmt(s), str(bool(ok))])
        return buf.getvalue()


def _draw_words(gibbs: GibbsApprox, n: int, depth: int, seed: int, cell: int) -> np.ndarray:
    heads = sample_words(gibbs, n, seed, cell)
    tails = rngmod.stream(seed, rngmod.TAILS, cell).integers(0, gibbs.k, (n, depth - gibbs.depth))
    return np.concatenate([tails, heads], axis=1)


def _jittered(box: np.ndarray, n_pairs: int, P: int, seed: int) -> np.ndarray:
    """``(n_pairs, P, d)`` parameters, one jittered point per stratum of the first axis."""
    g = rngmod.stream(seed, rngmod.JITTER)
    d = box.shape[0]
    u = g.random((n_pairs, P, d))
    u[..., 0] = (np.arange(P)[None, :] + u[..., 0]) / P
    return box[:, 0] + u * (box[:, 1] - box[:, 0])


def stratum_mass_check(gibbs: GibbsApprox, A: np.ndarray, B: np.ndarray, max_len: int = 2) -> dict:
    """Empirical mass of each stratum against ``mu[rho]**2`` plus four standard errors."""
    k, m = gibbs.k, A.shape[0]
    max_len = min(max_len, gibbs.depth)
    words = np.arange(k**gibbs.depth)
    worst, ok = -math.inf, True
    for n in range(max_len + 1):
        for code in range(k**n):
            rho = [(code // k ** (n - 1 - i)) % k for i in range(n)]
            # marginal of the n letters nearest the origin
            mu = float(gibbs.weights[words % k**n == code].sum()) if n else 1.0
            match = np.ones(m, dtype=bool)
            if n:
                match &= np.all(A[:, -n:] == rho, axis=1) & np.all(B[:, -n:] == rho, axis=1)
            match &= A[:, -n - 1] != B[:, -n - 1]
            emp = match.mean()
            sig = math.sqrt(max(mu**2 * (1 - mu**2), 1e-300) / m)
            worst = max(worst, emp - mu**2 - 4 * sig)
            ok &= emp <= mu**2 + 4 * sig
    return {"passed": bool(ok), "max_excess": float(worst), "max_len": max_len}


def density_integral(
    system,
    p0,
    delta: float,
    gibbs: GibbsApprox,
    radii,
    pair_samples: int = 100_000,
    p_per_pair: int = 32,
    seed: int = 0,
    fiber_addr=(),
    coding_depth: int | None = None,
) -> DensityIntegralReport:
    """Monte Carlo estimate of ``(1 / c_N r^N) E_{mu x mu} Leb{p in B : |pi_p(a) - pi_p(b)| < r}``.

    Pairs are drawn independently from the Gibbs heads with uniform tails;
    each pair sees ``p_per_pair`` jittered parameters.  Radii whose standard
    error exceeds half the value are unreliable; if none is reliable a
    :class:`PrecisionError` is raised.
    """
    radii = np.sort(np.asarray(radii, dtype=float))[::-1]
    if radii.size < 2 or radii[0] / radii[-1] < 100 * (1 - 1e-9):
        raise ContractError("radii must span at least two decades")
    N = fiber_dim(system)
    box = local_box(system, p0, delta)
    vol = _box_volume(box)
    depth = coding_depth or max(gibbs.depth, auto_coding_depth(system, radii[-1]))
    A = _draw_words(gibbs, pair_samples, depth, seed, 0)
    B = _draw_words(gibbs, pair_samples, depth, seed, 1)
    params = _jittered(box, pair_samples, p_per_pair, seed)
    counts = np.zeros((pair_samples, len(radii)))
    per = max(1, CHUNK_ROWS // p_per_pair)
    for s in range(0, pair_samples, per):
        a, b, pp = A[s : s + per], B[s : s + per], params[s : s + per]
        m = a.shape[0]
        flat = pp.reshape(-1, pp.shape[-1])
        xa = code_rows(system, flat, np.repeat(a, p_per_pair, axis=0), fiber_addr)
        xb = code_rows(system, flat, np.repeat(b, p_per_pair, axis=0), fiber_addr)
        dist = np.linalg.norm(xa - xb, axis=1).reshape(m, p_per_pair)
        counts[s : s + m] = (dist[:, :, None] < radii[None, None, :]).mean(axis=1)
    norm = vol / (ball_volume(N) * radii**N)
    values = counts.mean(axis=0) * norm
    errs = counts.std(axis=0, ddof=1) / math.sqrt(pair_samples) * norm
    reliable = (values > 0) & (errs <= 0.5 * values)
    if not reliable.any():
        raise PrecisionError("statistical error exceeds half of the estimate at every radius")
    rel = np.flatnonzero(reliable)
    value = float(values[rel[-1]])
    # growth over the last two decades covered by reliable radii
    last = radii[rel[-1]]
    ref = rel[radii[rel] >= last * 100 * (1 - 1e-9)]
    if ref.size:
        j = ref[-1]
        growth = (values[rel[-1]] / values[j]) ** (1.0 / math.log10(radii[j] / last))
        stable = bool(values[rel[-1]] / values[j] <= 2.0 and values[j] / values[rel[-1]] <= 2.0)
    else:
        growth, stable = math.nan, False
    singular = bool(growth >= 2.0)
    prov = {
        "p0": [float(v) for v in np.asarray(p0, dtype=float).reshape(-1)],
        "delta": float(delta),
        "seed": int(seed),
        "pair_samples": int(pair_samples),
        "p_per_pair": int(p_per_pair),
        "coding_depth": int(depth),
        "gibbs_depth": gibbs.depth,
    }
    check = stratum_mass_check(gibbs, A, B)
    return DensityIntegralReport(radii, values, errs, reliable, value, float(growth), stable, singular, check, prov)


def check_pair_strata(A: np.ndarray, B: np.ndarray) -> bool:
    """Every pair lands in exactly the stratum reported by :func:`pair_stratum`."""
    for a, b in zip(A, B):
        rho, split = pair_stratum(FiniteWord.backward(a), FiniteWord.backward(b))
        n = len(rho)
        if n and not (np.array_equal(a[-n:], rho.letters) and np.array_equal(b[-n:], rho.letters)):
            return False
        if n < len(a) and a[-n - 1] == b[-n - 1]:
            return False
    return True
