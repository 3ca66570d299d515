"""Pushforward measures, lower densities and cover measures of limit sets.

Two estimators look at the same question from opposite sides.  The nested
cover ``U_n = union of the depth-n images of X`` bounds the Lebesgue measure
of the limit set from above.  The lower density of the pushforward of the
Gibbs measure is evidence from below: if it stays finite the measure cannot
be singular.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import rng as rngmod
from .affine_ifs import AffineIfsFamily
from .errors import ContractError, PrecisionError, ResourceCapError
from .skewprod import FiberSystem, code_batch as fiber_code_batch
from .symbolic import DEFAULT_ENUMERATION_CAP, word_array
from .thermo import GibbsApprox, fmt, gibbs_weights, sample_words, similarity_dimension


def ball_volume(n_dim: int) -> float:
    """Volume ``c_N`` of the unit ball in ``R^N``."""
    return math.pi ** (n_dim / 2) / math.gamma(n_dim / 2 + 1)


def fiber_dim(system) -> int:
    return 1 if isinstance(system, AffineIfsFamily) else system.fiber_dim


def domain_volume(system) -> float:
    if isinstance(system, AffineIfsFamily):
        return system.diameter
    return 2.0**system.fiber_dim


def code_words(system, p, words, fiber_addr=()) -> np.ndarray:
    """Coded points ``(M, N)`` of a batch of backward words."""
    if isinstance(system, AffineIfsFamily):
        p = system.check_parameter(p)
        return system.code_batch(p if p.ndim > 1 else p[None], words)[..., None]
    return fiber_code_batch(system, p, fiber_addr, words)


def default_coding_depth(system, floor: int = 0, tol: float = 1e-12) -> int:
    g = system.gamma_bounds[1]
    return max(floor, int(math.ceil(math.log(tol / domain_volume(system)) / math.log(g))))


@dataclass
class EmpiricalMeasure:
    atoms: np.ndarray  # (M, N)
    weights: np.ndarray  # (M,)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        if self.atoms.shape[0] != len(self.weights):
            self.atoms = self.atoms.T
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < 0) or abs(math.fsum(self.weights) - 1.0) > 1e-9:
            raise ContractError("weights must be nonnegative and sum to 1")

    @property
    def n_atoms(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms


def pushforward(
    system, p, fiber_addr, gibbs: GibbsApprox, n_atoms: int, seed: int, coding_depth: int | None = None, cell: int = 0
) -> EmpiricalMeasure:
    """Atoms coded from Gibbs heads followed by uniform i.i.d. tails.

    The head (the ``gibbs.depth`` letters nearest the origin) is drawn from
    the Gibbs weights; the remaining letters up to ``coding_depth`` are
    uniform.
    """
    if n_atoms < 1:
        raise ContractError("need at least one atom")
    if coding_depth is None:
        coding_depth = default_coding_depth(system, gibbs.depth)
    if coding_depth < gibbs.depth:
        raise ContractError("coding depth must be at least the Gibbs depth")
    heads = sample_words(gibbs, n_atoms, seed, cell)
    tails = rngmod.stream(seed, rngmod.TAILS, cell).integers(0, gibbs.k, (n_atoms, coding_depth - gibbs.depth))
    words = np.concatenate([tails, heads], axis=1)
    atoms = code_words(system, p, words, fiber_addr)
    prov = {
        "system": getattr(system, "name", type(system).__name__),
        "p": [float(v) for v in np.asarray(p, dtype=float).reshape(-1)],
        "fiber_addr": [int(a) for a in (fiber_addr or ())],
        "gibbs_depth": gibbs.depth,
        "seed": int(seed),
        "cell": int(cell),
        "coding_depth": int(coding_depth),
    }
    return EmpiricalMeasure(atoms, np.full(n_atoms, 1.0 / n_atoms), prov)


@dataclass
class DensityReport:
    radii: np.ndarray
    density_values: np.ndarray  # (points, radii)
    reliable: np.ndarray  # (radii,) bool
    liminf_proxy: np.ndarray  # (points,)
    c_N: float

    def median_trend(self) -> np.ndarray:
        return np.median(self.density_values, axis=0)

    def to_dict(self):
        return {
            "radii": [float(r) for r in self.radii],
            "reliable": [bool(b) for b in self.reliable],
            "median_density": [float(v) for v in self.median_trend()],
            "c_N": self.c_N,
        }


def resolution_gate(n_atoms: int, n_dim: int) -> float:
    return (10.0 / n_atoms) ** (1.0 / n_dim)


def lower_density(measure: EmpiricalMeasure, eval_points, radii) -> DensityReport:
    """Ball masses ``nu(B(x, r)) / (c_N r^N)`` at each point and radius."""
    radii = np.asarray(radii, dtype=float)
    pts = np.atleast_2d(np.asarray(eval_points, dtype=float))
    N = measure.dim
    if pts.shape[1] != N:
        pts = pts.reshape(-1, N)
    gate = resolution_gate(measure.n_atoms, N)
    reliable = radii >= gate
    if not reliable.any():
        raise PrecisionError(f"all radii are below the resolution gate {gate:.3g} for {measure.n_atoms} atoms")
    cN = ball_volume(N)
    uniform = np.allclose(measure.weights, measure.weights[0])
    vals = np.empty((len(pts), len(radii)))
    if N == 1:
        order = np.argsort(measure.atoms[:, 0], kind="stable")
        xs = measure.atoms[order, 0]
        cw = np.concatenate([[0.0], np.cumsum(measure.weights[order])])
        for j, r in enumerate(radii):
            lo = np.searchsorted(xs, pts[:, 0] - r, side="left")
            hi = np.searchsorted(xs, pts[:, 0] + r, side="right")
            vals[:, j] = (cw[hi] - cw[lo]) / (cN * r)
    else:
        tree = cKDTree(measure.atoms)
        for j, r in enumerate(radii):
            if uniform:
                counts = tree.query_ball_point(pts, r, return_length=True)
                mass = counts * measure.weights[0]
            else:
                lists = tree.query_ball_point(pts, r)
                mass = np.array([measure.weights[ix].sum() for ix in lists])
            vals[:, j] = mass / (cN * r**N)
    proxy = vals[:, reliable].min(axis=1)
    return DensityReport(radii, vals, reliable, proxy, cN)


def density_verdict(report: DensityReport, factor: float = 2.0) -> dict:
    """``stable`` when the median density over reliable radii varies by at most ``factor``."""
    trend = report.median_trend()[report.reliable]
    lo, hi = float(trend.min()), float(trend.max())
    ratio = hi / lo if lo > 0 else math.inf
    return {"stable": bool(ratio <= factor), "ratio": ratio, "median_density": [float(v) for v in trend]}


# covers ----------------------------------------------------------------------


@dataclass
class CoverEstimate:
    depths: list
    union_measure: list
    n_pieces: list

    @property
    def trend(self) -> list:
        return list(self.union_measure)

    @property
    def depth(self) -> int:
        return self.depths[-1]

    def decay_rate(self) -> float:
        """Geometric rate per level between the first and last depth."""
        a, b = self.union_measure[0], self.union_measure[-1]
        span = self.depths[-1] - self.depths[0]
        if span == 0:
            return 1.0
        if b <= 0:
            return 0.0
        return (b / a) ** (1.0 / span)

    def to_dict(self):
        return {"depths": list(self.depths), "union_measure": list(self.union_measure), "n_pieces": list(self.n_pieces)}


def merge_intervals(lo: np.ndarray, hi: np.ndarray):
    """Union of closed intervals as sorted disjoint ``(lo, hi)`` arrays."""
    if lo.size == 0:
        return lo, hi
    order = np.argsort(lo, kind="stable")
    lo, hi = lo[order], hi[order]
    reach = np.maximum.accumulate(hi)
    start = np.ones(lo.size, dtype=bool)
    start[1:] = lo[1:] > reach[:-1]
    idx = np.flatnonzero(start)
    ends = np.append(idx[1:], lo.size) - 1
    return lo[idx], reach[ends]


def _letter_maps_1d(system, p, fiber_addr):
    """Callables ``f(context_letters, a, x)`` for one-dimensional systems, and the context length."""
    if isinstance(system, AffineIfsFamily):
        s, b = system.coefficients(p)
        s, b = s.reshape(-1), b.reshape(-1)
        return (lambda addr, x: s[addr[0]] * x + b[addr[0]]), 1
    pp = system.check_parameter(p).reshape(1, -1)

    def f(addr, x):
        a = np.broadcast_to(np.asarray(addr, dtype=np.int64), (x.size, len(addr)))
        return system.fiber_map(np.broadcast_to(pp, (x.size, pp.shape[1])), a, x.reshape(-1, 1))[:, 0]

    return f, system.address_depth


def cover_measure(system, p, fiber_addr=(), depths=(1, 2, 3, 4), cap: int = DEFAULT_ENUMERATION_CAP) -> CoverEstimate:
    """Measure of the union of depth-``n`` images of ``X`` for each requested depth.

    Uses the recursion ``U_{n+1}(c) = union over b of f_{b c}(U_n(b c))``
    over address contexts ``c`` of ``address_depth - 1`` letters.  One
    dimension is exact (merged interval unions); two dimensions use an
    occupancy grid of side about ``gamma_hi**n / 4``, at most 2048 cells per
    axis.  ``cap`` bounds the number of pieces held at any level.
    """
    depths = sorted(int(d) for d in depths)
    if not depths or depths[0] < 0:
        raise ContractError("depths must be nonnegative")
    N = fiber_dim(system)
    if N == 1:
        return _cover_1d(system, p, fiber_addr, depths, cap)
    if N == 2:
        return _cover_2d(system, p, fiber_addr, depths, cap)
    raise ContractError("cover_measure supports fiber dimensions 1 and 2")


def _contexts(k, D):
    return [tuple(row) for row in word_array(k, D - 1)] if D > 1 else [()]


def _cover_1d(system, p, fiber_addr, depths, cap):
    k = system.alphabet.size
    f, D = _letter_maps_1d(system, p, fiber_addr)
    lo_x, hi_x = system.domain if isinstance(system, AffineIfsFamily) else (-1.0, 1.0)
    ctxs = _contexts(k, D)
    U = {c: (np.array([lo_x]), np.array([hi_x])) for c in ctxs}
    out, pieces = [], []
    base = tuple(int(a) for a in (system.address_letters(fiber_addr) if isinstance(system, FiberSystem) else ()))
    for n in range(1, depths[-1] + 1):
        new = {}
        for c in ctxs:
            los, his = [], []
            total = 0
            for b in range(k):
                addr = (b,) + c
                inner = addr[: D - 1] if D > 1 else ()
                lo, hi = U[inner]
                total += lo.size
                if total > cap:
                    raise ResourceCapError(f"cover at depth {n} needs more than {cap} intervals")
                a1, a2 = f(addr[:D], lo), f(addr[:D], hi)
                los.append(np.minimum(a1, a2))
                his.append(np.maximum(a1, a2))
            new[c] = merge_intervals(np.concatenate(los), np.concatenate(his))
        U = new
        if n in depths:
            key = base[: D - 1] if D > 1 else ()
            lo, hi = U[key]
            out.append(float(math.fsum(hi - lo)))
            pieces.append(int(lo.size))
    if 0 in depths:
        out.insert(0, hi_x - lo_x)
        pieces.insert(0, 1)
    return CoverEstimate(depths, out, pieces)


def _cover_2d(system: FiberSystem, p, fiber_addr, depths, cap):
    k = system.k
    D = system.address_depth
    g = system.gamma_bounds[1]
    side = max(g ** depths[-1] / 4.0, 2.0 / 2048)
    n_cells = int(math.ceil(2.0 / side))
    h = 2.0 / n_cells
    pp = system.check_parameter(p).reshape(1, -1)
    ctxs = _contexts(k, D)
    U = {c: np.ones((n_cells, n_cells), dtype=bool) for c in ctxs}
    corners = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    base = tuple(int(a) for a in system.address_letters(fiber_addr))
    out, pieces = [], []
    for n in range(1, depths[-1] + 1):
        new = {}
        for c in ctxs:
            grid = np.zeros((n_cells, n_cells), dtype=bool)
            for b in range(k):
                addr = (b,) + c
                inner = addr[: D - 1] if D > 1 else ()
                occ = np.argwhere(U[inner])
                if occ.shape[0] * 4 > cap:
                    raise ResourceCapError(f"cover at depth {n} needs more than {cap} cells")
                pts = (-1.0 + (occ[:, None, :] + corners[None]) * h).reshape(-1, 2)
                a = np.broadcast_to(np.asarray(addr[:D]), (len(pts), D))
                img = system.fiber_map(np.broadcast_to(pp, (len(pts), pp.shape[1])), a, pts).reshape(-1, 4, 2)
                lo = np.floor((img.min(axis=1) + 1.0) / h).astype(int)
                hi = np.floor((img.max(axis=1) + 1.0) / h).astype(int)
                lo = np.clip(lo, 0, n_cells - 1)
                hi = np.clip(hi, 0, n_cells - 1)
                span = int((hi - lo).max()) + 1 if len(lo) else 0
                for di in range(span):
                    for dj in range(span):
                        ii = np.minimum(lo[:, 0] + di, hi[:, 0])
                        jj = np.minimum(lo[:, 1] + dj, hi[:, 1])
                        grid[ii, jj] = True
            # images nest, so intersecting with the previous level only removes rounding
            new[c] = grid & U[c]
        U = new
        if n in depths:
            key = base[: D - 1] if D > 1 else ()
            cnt = int(U[key].sum())
            out.append(cnt * h * h)
            pieces.append(cnt)
    if 0 in depths:
        out.insert(0, 4.0)
        pieces.insert(0, n_cells * n_cells)
    return CoverEstimate(depths, out, pieces)


# parameter scans -------------------------------------------------------------


@dataclass(frozen=True)
class ScanSpec:
    cover_depths: tuple = (6, 8, 10, 12)
    n_atoms: int = 100_000
    n_eval: int = 200
    radii: tuple = (3e-2, 1e-2, 3e-3, 1e-3)
    gibbs_depth: int = 4
    positive_fraction_of_X: float = 0.05
    seed: int = 0
    threads: int = 1


@dataclass
class ScanTable:
    rows: list
    spec: ScanSpec

    @property
    def fraction_positive(self) -> float:
        return sum(r["positive"] for r in self.rows) / len(self.rows) if self.rows else 0.0

    def cross_consistent(self, rate: float = 0.8) -> bool:
        """No row may show a stable finite density together with a cover decaying faster than ``rate``."""
        return not any(r.get("density_stable") and r["cover_decay_rate"] < rate for r in self.rows)

    def summary(self) -> dict:
        return {
            "n_parameters": len(self.rows),
            "fraction_positive": self.fraction_positive,
            "cross_consistent": self.cross_consistent(),
            "seed": self.spec.seed,
            "cover_depths": list(self.spec.cover_depths),
            "n_atoms": self.spec.n_atoms,
            "radii": list(self.spec.radii),
            "gibbs_depth": self.spec.gibbs_depth,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        depths = list(self.spec.cover_depths)
        w.writerow(["index", "p", "dimension"] + [f"cover_{d}" for d in depths] + ["cover_decay_rate", "density_ratio", "density_stable", "positive"])
        for r in self.rows:
            w.writerow(
                [r["index"], " ".join(fmt(v) for v in r["p"]), fmt(r["dimension"])]
                + [fmt(v) for v in r["cover"]]
                + [fmt(r["cover_decay_rate"]), fmt(r.get("density_ratio", float("nan"))), str(r.get("density_stable", "")), str(r["positive"])]
            )
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), "rows": self.rows}, sort_keys=True, indent=2)


def scan_one(system, p, spec: ScanSpec, index: int = 0, fiber_addr=()) -> dict:
    p = np.asarray(p, dtype=float).reshape(-1)
    delta = similarity_dimension(system, p, fiber_addr=fiber_addr)
    cov = cover_measure(system, p, fiber_addr, spec.cover_depths)
    vol = domain_volume(system)
    row = {
        "index": index,
        "p": [float(v) for v in p],
        "dimension": delta,
        "cover": cov.union_measure,
        "cover_decay_rate": cov.decay_rate(),
    }
    positive = cov.union_measure[-1] >= spec.positive_fraction_of_X * vol
    if spec.n_atoms > 0:
        gibbs = gibbs_weights(system, p, spec.gibbs_depth, fiber_addr, delta)
        meas = pushforward(system, p, fiber_addr, gibbs, spec.n_atoms, spec.seed, cell=index)
        pts = meas.atoms[: spec.n_eval]
        rep = lower_density(meas, pts, spec.radii)
        verdict = density_verdict(rep)
        row["density_ratio"] = verdict["ratio"]
        row["density_stable"] = verdict["stable"]
        positive = positive and verdict["stable"]
    row["positive"] = bool(positive)
    return row


def parameter_scan(system, p_values, spec: ScanSpec = ScanSpec(), fiber_addr=()) -> ScanTable:
    """Per-parameter dimension, cover trend and density verdict; rows in input order."""
    p_values = np.atleast_2d(np.asarray(p_values, dtype=float))
    if p_values.shape[1] != system.parameter_box.shape[0]:
        p_values = p_values.reshape(-1, system.parameter_box.shape[0])
    jobs = list(enumerate(p_values))
    if spec.threads > 1:
        with ThreadPoolExecutor(spec.threads) as pool:
            rows = list(pool.map(lambda ip: scan_one(system, ip[1], spec, ip[0], fiber_addr), jobs))
    else:
        rows = [scan_one(system, p, spec, i, fiber_addr) for i, p in jobs]
    return ScanTable(rows, spec)


def sample_parameters(system, n: int, seed: int, method: str = "random") -> np.ndarray:
    """Parameters in the box: seeded uniform draws or a regular grid (``d = 1``)."""
    box = system.parameter_box
    if method == "grid":
        if box.shape[0] != 1:
            raise ContractError("grid sampling is for one parameter")
        return ((np.arange(n) + 0.5) / n * (box[0, 1] - box[0, 0]) + box[0, 0])[:, None]
    g = rngmod.stream(seed, rngmod.SCAN)
    return box[:, 0] + g.random((n, box.shape[0])) * (box[:, 1] - box[:, 0])
