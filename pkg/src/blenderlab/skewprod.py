"""Fiberwise map families over the full shift.

A :class:`FiberSystem` gives, for a parameter ``p``, a fiber address and a
point ``x`` of the cube ``X = [-1, 1]^N``, the image ``f_{p, addr}(x)`` and its
Jacobian.  All callbacks are batched: ``p`` has shape ``(M, d)``, addresses
``(M, D)`` (``D = address_depth``; column 0 is the branch letter) and points
``(M, N)``.

Composition along a backward word ``alpha = (a_{-n}, ..., a_{-1})`` applies
the letter farthest from the origin first.  The stage for ``a_{-k}`` reads the
address ``a_{-k} ... a_{-1}`` followed by the base address, truncated to
``D`` letters.

Systems built from a *formula* (a function written with ``+ - * /`` on
coordinate columns) also evaluate on Taylor series, which gives exact
Jacobians and the jet transport used by :mod:`blenderlab.jets`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .affine_ifs import AffineIfsFamily, CodedPoint
from .errors import ContractError, DomainError, InvariantViolation
from .symbolic import Alphabet, FiniteWord, word_array
from .taylor import MIXED_FUNCS, TaylorSeries, multi_indices

UNIPOTENCY_TOL = 1e-9
STATE_BUDGET = 4_000_000


def select(idx, values):
    """Row-wise choice ``values[idx[m]][m]`` for arrays or Taylor series."""
    idx = np.asarray(idx)
    if any(isinstance(v, TaylorSeries) for v in values):
        ref = next(v for v in values if isinstance(v, TaylorSeries))
        stack = []
        for v in values:
            if not isinstance(v, TaylorSeries):
                v = TaylorSeries.constant(np.broadcast_to(v, idx.shape), ref.d, ref.s)
            stack.append(np.broadcast_to(v.coeffs, idx.shape + (ref.size,)))
        c = np.take_along_axis(np.stack(stack, axis=0), idx[None, ..., None], 0)[0]
        return TaylorSeries(c, ref.d, ref.s)
    stack = np.stack([np.broadcast_to(np.asarray(v, dtype=float), idx.shape) for v in values], axis=0)
    return np.take_along_axis(stack, idx[None], 0)[0]


def _as_box(box, d):
    if box is None:
        box = [[0.0, 0.0]] * d
    box = np.atleast_2d(np.asarray(box, dtype=float))
    if box.shape != (d, 2) or np.any(box[:, 0] > box[:, 1]):
        raise InvariantViolation(f"parameter box must have shape ({d}, 2) with lo <= hi")
    return box


@dataclass(frozen=True)
class UnipotencyReport:
    max_upper_violation: float
    max_diag_spread: float
    eig_range: tuple
    n_samples: int
    tol: float = UNIPOTENCY_TOL

    @property
    def passed(self) -> bool:
        lo, hi = self.eig_range
        return (
            self.max_upper_violation <= self.tol
            and self.max_diag_spread <= self.tol
            and 0.0 < lo <= hi < 1.0
        )

    def to_dict(self):
        return {
            "max_upper_violation": self.max_upper_violation,
            "max_diag_spread": self.max_diag_spread,
            "eig_range": list(self.eig_range),
            "n_samples": self.n_samples,
            "tol": self.tol,
            "passed": self.passed,
        }


@dataclass(frozen=True)
class SampleSpec:
    """How many random ``(p, address, x)`` states to draw, and from which seed."""

    n: int = 1000
    seed: int = 0
    include_corners: bool = True


@dataclass(frozen=True, eq=False)
class FiberSystem:
    """A parameterized skew-product fiber family.

    Parameters
    ----------
    alphabet : Alphabet
    fiber_dim : int
        ``N``, the dimension of the fiber cube.
    param_dim : int
        ``d``.
    fiber_map, fiber_jacobian : callable
        Batched callbacks ``(p, addr, x)``.
    address_depth : int
        Letters of the fiber address the maps may read (at least 1).
    domain_margin : float
        ``X'`` is the cube of half-width ``1 + domain_margin``.
    parameter_box : array_like
        ``(d, 2)`` closed box.
    formula : callable, optional
        ``formula(p_cols, addr, x_cols) -> list`` in plain arithmetic; enables
        exact jets.
    """

    alphabet: Alphabet
    fiber_dim: int
    param_dim: int
    fiber_map: Callable
    fiber_jacobian: Callable
    address_depth: int = 1
    domain_margin: float = 0.05
    parameter_box: np.ndarray = None
    formula: Callable | None = None
    name: str = "fiber"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fiber_dim < 1 or self.param_dim < 1:
            raise InvariantViolation("fiber and parameter dimensions must be positive")
        if self.address_depth < 1:
            raise InvariantViolation("address_depth must be at least 1")
        if self.domain_margin < 0:
            raise InvariantViolation("domain margin must be nonnegative")
        object.__setattr__(self, "parameter_box", _as_box(self.parameter_box, self.param_dim))

    @classmethod
    def from_formula(cls, formula, alphabet, fiber_dim, param_dim, **kw) -> "FiberSystem":
        n = fiber_dim

        def fmap(p, addr, x):
            out = formula([p[:, i] for i in range(p.shape[1])], addr, [x[:, i] for i in range(n)])
            return np.stack([np.broadcast_to(np.asarray(o, dtype=float), x.shape[:1]) for o in out], axis=1)

        def fjac(p, addr, x):
            xs = [TaylorSeries.variable(x[:, i], i, n, 1) for i in range(n)]
            out = formula([p[:, i] for i in range(p.shape[1])], addr, xs)
            jac = np.zeros((x.shape[0], n, n))
            for r, o in enumerate(out):
                if isinstance(o, TaylorSeries):
                    jac[:, r, :] = o.coeffs[..., 1 : n + 1]
            return jac

        return cls(alphabet, fiber_dim, param_dim, fmap, fjac, formula=formula, **kw)

    @property
    def k(self) -> int:
        return self.alphabet.size

    @property
    def outer_radius(self) -> float:
        return 1.0 + self.domain_margin

    def outer_box(self, margin: float = 0.05) -> np.ndarray:
        box = self.parameter_box
        w = box[:, 1] - box[:, 0]
        return np.stack([box[:, 0] - margin * w, box[:, 1] + margin * w], axis=1)

    def check_parameter(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.ndim == 0:
            p = p[None]
        if p.shape[-1] != self.param_dim:
            raise ContractError(f"parameter has dimension {p.shape[-1]}, system expects {self.param_dim}")
        box = self.outer_box()
        tol = 1e-12 * max(1.0, float(np.abs(box).max()))
        if np.any(p < box[:, 0] - tol) or np.any(p > box[:, 1] + tol):
            raise DomainError("parameter outside the neighbourhood of the parameter box")
        return p

    def address_letters(self, addr) -> np.ndarray:
        """Base address letters needed beyond the word (``address_depth - 1`` of them)."""
        need = self.address_depth - 1
        if isinstance(addr, FiniteWord):
            if addr.orientation != "forward":
                raise ContractError("fiber addresses are forward words")
            if len(addr) < need and not addr.is_infinite:
                raise ContractError(f"fiber address needs {need} letters, got {len(addr)}")
            letters = addr.prefix(need).letters if need else ()
        else:
            letters = tuple(int(a) for a in (() if addr is None else addr))
            if len(letters) < need:
                raise ContractError(f"fiber address needs {need} letters, got {len(letters)}")
            letters = letters[:need]
        out = np.asarray(letters, dtype=np.int64)
        if out.size and (out.min() < 0 or out.max() >= self.k):
            raise InvariantViolation("fiber address letter outside alphabet")
        return out

    # basic batched evaluation -------------------------------------------------

    def _eval(self, p, addr, x, jac=True):
        m = x.shape[0]
        pp = np.broadcast_to(p, (m, self.param_dim))
        y = self.fiber_map(pp, addr, x)
        j = self.fiber_jacobian(pp, addr, x) if jac else None
        return y, j

    @cached_property
    def unipotency(self) -> UnipotencyReport:
        return verify_unipotent(self)

    @cached_property
    def gamma_bounds(self) -> tuple:
        if "gamma_bounds" in self.meta:
            return tuple(self.meta["gamma_bounds"])
        rep = self.unipotency
        lo, hi = rep.eig_range
        return (lo * (1 - 1e-9), min(hi * (1 + 1e-9), 0.5 * (1 + hi)))

    @property
    def gamma_hi(self) -> float:
        return self.gamma_bounds[1]

    def require_unipotent(self):
        if not self.unipotency.passed:
            raise ContractError(f"assumption (U) not certified for {self.name}: {self.unipotency.to_dict()}")


# compositions -----------------------------------------------------------------


def _extended_words(sys: FiberSystem, words: np.ndarray, base: np.ndarray) -> np.ndarray:
    words = np.asarray(words, dtype=np.int64)
    if words.ndim == 1:
        words = words[None]
    tail = np.broadcast_to(base, (words.shape[0], base.size))
    return np.concatenate([words, tail], axis=1)


def orbit(sys: FiberSystem, p, fiber_addr, words, x, with_jacobian=False, check=True):
    """Push points through the composition along each word.

    Parameters
    ----------
    words : array_like of int, shape (M, n)
        Backward words in reading order.
    x : array_like, shape (M, N)

    Returns
    -------
    y : ndarray (M, N)
    log_lambda : ndarray (M,)
        Sum of ``log |J_00|`` over the stages.
    jac : ndarray (M, N, N) or None
    """
    p = sys.check_parameter(p)
    base = sys.address_letters(fiber_addr)
    words = np.atleast_2d(np.asarray(words, dtype=np.int64))
    x = np.array(x, dtype=float).reshape(-1, sys.fiber_dim)
    m = max(words.shape[0], x.shape[0])
    words = np.broadcast_to(words, (m, words.shape[1]))
    x = np.broadcast_to(x, (m, sys.fiber_dim)).copy()
    p = np.broadcast_to(p, (m, sys.param_dim))
    ext = _extended_words(sys, words, base)
    n = words.shape[1]
    D = sys.address_depth
    loglam = np.zeros(m)
    jac = np.broadcast_to(np.eye(sys.fiber_dim), (m, sys.fiber_dim, sys.fiber_dim)).copy() if with_jacobian else None
    for j in range(n):
        addr = ext[:, j : j + D]
        y, J = sys._eval(p, addr, x)
        if check and np.any(np.abs(y) > sys.outer_radius):
            raise DomainError(f"orbit left X' at stage {j} (letter a_{{-{n - j}}})", stage=j)
        loglam += np.log(np.abs(J[:, 0, 0]))
        if with_jacobian:
            jac = J @ jac
        x = y
    return x, loglam, jac


@dataclass(frozen=True)
class ComposedMap:
    sys: FiberSystem
    p: np.ndarray
    fiber_addr: object
    alpha: FiniteWord

    def _words(self, m):
        return np.broadcast_to(np.asarray(self.alpha.letters, dtype=np.int64), (m, len(self.alpha)))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, self.sys.fiber_dim)
        if np.any(np.abs(pts) > self.sys.outer_radius):
            raise DomainError("input point outside X'", stage=-1)
        y, _, _ = orbit(self.sys, self.p, self.fiber_addr, self._words(len(pts)), pts)
        return y.reshape(x.shape)

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, self.sys.fiber_dim)
        _, _, jac = orbit(self.sys, self.p, self.fiber_addr, self._words(len(pts)), pts, with_jacobian=True)
        return jac if x.ndim > 1 else jac[0]


def compose_fiber(sys: FiberSystem, p, fiber_addr, alpha: FiniteWord) -> tuple:
    """The composed map ``psi^alpha_{p, addr}`` and its Jacobian, evaluated lazily."""
    if alpha.orientation != "backward":
        raise ContractError("compose_fiber expects a backward word")
    alpha.check_alphabet(sys.alphabet)
    cm = ComposedMap(sys, sys.check_parameter(p), fiber_addr, alpha)
    return cm, cm.jacobian


def eigenvalue_product(sys: FiberSystem, p, fiber_addr, alpha: FiniteWord, x):
    """Product of the stage eigenvalues ``|J_00|`` along the orbit of ``x``."""
    sys.require_unipotent()
    x = np.asarray(x, dtype=float)
    pts = x.reshape(-1, sys.fiber_dim)
    if not len(alpha):
        out = np.ones(len(pts))
    else:
        words = np.broadcast_to(np.asarray(alpha.letters), (len(pts), len(alpha)))
        _, loglam, _ = orbit(sys, p, fiber_addr, words, pts)
        out = np.exp(loglam)
    return out if x.ndim > 1 else float(out[0])


def grid_points(n_dim: int, per_axis: int | None = None) -> tuple[np.ndarray, float]:
    """Regular grid on ``[-1, 1]^N`` and its spacing."""
    if per_axis is None:
        per_axis = 33 if n_dim <= 2 else max(3, int(round(33 ** (2.0 / n_dim))))
    if per_axis < 2:
        raise ContractError("grid needs at least 2 points per axis")
    axis = np.linspace(-1.0, 1.0, per_axis)
    pts = np.stack(np.meshgrid(*([axis] * n_dim), indexing="ij"), axis=-1).reshape(-1, n_dim)
    return pts, 2.0 / (per_axis - 1)


@dataclass(frozen=True)
class LambdaEstimate:
    value: float
    upper: float
    lower_bound_only: bool = True


def _upper_log(logs: np.ndarray, per_axis: int, n_dim: int) -> np.ndarray:
    """Lipschitz inflation from neighbour differences on the grid (last axis = grid)."""
    shaped = logs.reshape(logs.shape[:-1] + (per_axis,) * n_dim)
    infl = np.zeros(logs.shape[:-1])
    lead = logs.ndim - 1
    for ax in range(n_dim):
        diff = np.abs(np.diff(shaped, axis=lead + ax))
        infl = infl + 0.5 * diff.reshape(diff.shape[:lead] + (-1,)).max(axis=-1)
    return logs.max(axis=-1) + infl


def lambda_sup(sys: FiberSystem, p, fiber_addr, alpha: FiniteWord, per_axis: int | None = None) -> LambdaEstimate:
    """Grid maximum of the eigenvalue product, with a Lipschitz-inflated upper value."""
    sys.require_unipotent()
    pts, _ = grid_points(sys.fiber_dim, per_axis)
    per = int(round(len(pts) ** (1.0 / sys.fiber_dim)))
    if not len(alpha):
        return LambdaEstimate(1.0, 1.0)
    words = np.broadcast_to(np.asarray(alpha.letters), (len(pts), len(alpha)))
    _, loglam, _ = orbit(sys, p, fiber_addr, words, pts)
    up = _upper_log(loglam[None], per, sys.fiber_dim)[0]
    return LambdaEstimate(float(np.exp(loglam.max())), float(np.exp(up)))


def log_lambda_table(sys: FiberSystem, p, fiber_addr, n: int, per_axis: int | None = None, cap: int = 10**8):
    """``log Lambda`` for every word of length ``n`` (lexicographic), grid max and inflated.

    Words sharing their far letters share orbit prefixes; states are expanded
    one level at a time and chunked over leading letters to respect
    ``STATE_BUDGET``.
    """
    sys.require_unipotent()
    k = sys.k
    if k**n > cap:
        from .errors import ResourceCapError

        raise ResourceCapError(f"{k ** n} words requested, enumeration cap is {cap}")
    p = sys.check_parameter(p).reshape(-1)
    base = sys.address_letters(fiber_addr)
    pts, _ = grid_points(sys.fiber_dim, per_axis)
    per = int(round(len(pts) ** (1.0 / sys.fiber_dim)))
    G = len(pts)
    if n == 0:
        return np.zeros(1), np.zeros(1)
    D = sys.address_depth
    lows, ups = [], []

    def run(prefix: tuple):
        f = len(prefix)
        if f < n - 1 and k ** (n - f) * G > STATE_BUDGET:
            for a in range(k):
                run(prefix + (a,))
            return
        free = np.zeros((1, 0), dtype=np.int64)
        x = np.broadcast_to(pts, (1, G, sys.fiber_dim)).copy()
        loglam = np.zeros((1, G))
        L = f
        for j in range(n):
            target = max(f, min(n, j + D))
            if target > L:
                new = target - L
                block = word_array(k, new)
                S = free.shape[0]
                free = np.concatenate([np.repeat(free, k**new, axis=0), np.tile(block, (S, 1))], axis=1)
                x = np.repeat(x, k**new, axis=0)
                loglam = np.repeat(loglam, k**new, axis=0)
                L = target
            S = free.shape[0]
            cols = np.concatenate(
                [np.broadcast_to(np.asarray(prefix, dtype=np.int64), (S, f)), free, np.broadcast_to(base, (S, base.size))],
                axis=1,
            )
            addr = cols[:, j : j + D]
            addr = np.repeat(addr, G, axis=0)
            flat = x.reshape(S * G, sys.fiber_dim)
            y, J = sys._eval(p[None], addr, flat)
            if np.any(np.abs(y) > sys.outer_radius):
                raise DomainError(f"orbit left X' at stage {j}", stage=j)
            loglam = loglam + np.log(np.abs(J[:, 0, 0])).reshape(S, G)
            x = y.reshape(S, G, sys.fiber_dim)
        lows.append(loglam.max(axis=1))
        ups.append(_upper_log(loglam, per, sys.fiber_dim))

    run(())
    return np.concatenate(lows), np.concatenate(ups)


def _poly_constant(sys: FiberSystem) -> float:
    rep_j = _sample_jacobians(sys, SampleSpec(n=256, seed=1))[3]
    lam = np.abs(rep_j[:, 0, 0])
    off = np.abs(np.tril(rep_j, -1)).max(axis=(1, 2)) if sys.fiber_dim > 1 else np.zeros(len(lam))
    K = float((off / lam).max()) if len(lam) else 0.0
    return 2.0 * math.sqrt(sys.fiber_dim) * (1.0 + K) ** (sys.fiber_dim - 1)


def code_fiber_point(sys: FiberSystem, p, fiber_addr, alpha: FiniteWord, depth: int | None = None) -> CodedPoint:
    """Image of the origin under the depth-``n`` truncation of ``alpha``.

    The error bound is ``C * n**N * gamma_hi**n`` with ``C`` built from the
    sampled size of the off-diagonal Jacobian entries.
    """
    if depth is None:
        depth = 60 if alpha.is_infinite else len(alpha)
    head = alpha.prefix(depth)
    x0 = np.zeros((1, sys.fiber_dim))
    if depth == 0:
        value = x0[0]
    else:
        value, _, _ = orbit(sys, p, fiber_addr, np.asarray(head.letters)[None], x0)
        value = value[0]
    C = _poly_constant(sys)
    bound = C * max(depth, 1) ** sys.fiber_dim * sys.gamma_hi**depth
    return CodedPoint(value, float(bound), depth)


def code_batch(sys: FiberSystem, p, fiber_addr, words) -> np.ndarray:
    """Coded points for a batch of words, shape ``(M, N)``; ``p`` may be ``(M, d)``."""
    words = np.atleast_2d(np.asarray(words, dtype=np.int64))
    p = sys.check_parameter(p)
    if p.ndim == 2 and p.shape[0] > 1:
        m = max(p.shape[0], words.shape[0])
        words = np.broadcast_to(words, (m, words.shape[1]))
        x0 = np.zeros((m, sys.fiber_dim))
        base = sys.address_letters(fiber_addr)
        ext = _extended_words(sys, words, base)
        x = x0
        D = sys.address_depth
        pp = np.broadcast_to(p, (m, sys.param_dim))
        for j in range(words.shape[1]):
            x = sys.fiber_map(pp, ext[:, j : j + D], x)
        return x
    x0 = np.zeros((words.shape[0], sys.fiber_dim))
    y, _, _ = orbit(sys, p.reshape(-1), fiber_addr, words, x0, check=False)
    return y


# sampling checks --------------------------------------------------------------


def _sample_states(sys: FiberSystem, spec: SampleSpec):
    g = rngmod.stream(spec.seed, rngmod.CHECKS)
    box = sys.parameter_box
    p = box[:, 0] + g.random((spec.n, sys.param_dim)) * (box[:, 1] - box[:, 0])
    if spec.include_corners:
        corners = np.stack(np.meshgrid(*box, indexing="ij"), axis=-1).reshape(-1, sys.param_dim)
        p[: min(len(corners), spec.n)] = corners[: spec.n]
    addr = g.integers(0, sys.k, (spec.n, sys.address_depth))
    r = sys.outer_radius
    x = g.uniform(-r, r, (spec.n, sys.fiber_dim))
    return p, addr, x


def _sample_jacobians(sys, spec):
    p, addr, x = _sample_states(sys, spec)
    return p, addr, x, sys.fiber_jacobian(p, addr, x)


def unipotency_of_jacobians(J: np.ndarray, tol: float = UNIPOTENCY_TOL) -> UnipotencyReport:
    J = np.asarray(J, dtype=float)
    n = J.shape[-1]
    upper = np.abs(np.triu(J, 1)).max() if n > 1 else 0.0
    diag = np.diagonal(J, axis1=-2, axis2=-1)
    spread = float((diag.max(axis=-1) - diag.min(axis=-1)).max())
    mags = np.abs(diag[..., 0])
    return UnipotencyReport(float(upper), spread, (float(mags.min()), float(mags.max())), int(J.shape[0]), tol)


def verify_unipotent(sys: FiberSystem, spec: SampleSpec = SampleSpec()) -> UnipotencyReport:
    """Sampled check that every fiber Jacobian is lower-triangular with one repeated diagonal value."""
    _, _, _, J = _sample_jacobians(sys, spec)
    return unipotency_of_jacobians(J)


def containment_report(sys: FiberSystem, spec: SampleSpec = SampleSpec()) -> dict:
    """Sampled check that ``X'`` is mapped strictly inside ``X``."""
    p, addr, x = _sample_states(sys, spec)
    r = sys.outer_radius
    corners = np.stack(np.meshgrid(*([[-r, r]] * sys.fiber_dim), indexing="ij"), axis=-1).reshape(-1, sys.fiber_dim)
    m = min(len(corners), len(x))
    x[:m] = corners[:m]
    y = sys.fiber_map(p, addr, x)
    worst = float(np.abs(y).max())
    return {"max_abs_image": worst, "passed": worst < 1.0, "n_samples": len(x)}


# perturbations ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PerturbationFamily:
    """Displacements ``delta(t, p, addr, x)`` added to the fiber maps.

    ``delta_jacobian`` may be omitted; a central difference in ``x`` is then used.
    """

    t_dim: int
    delta: Callable
    theta_bound: float
    delta_jacobian: Callable | None = None
    centered: bool = True

    def jacobian(self, t, p, addr, x, h=1e-6):
        if self.delta_jacobian is not None:
            return self.delta_jacobian(t, p, addr, x)
        n = x.shape[1]
        J = np.zeros((x.shape[0], n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            J[:, :, i] = (self.delta(t, p, addr, x + e) - self.delta(t, p, addr, x - e)) / (2 * h)
        return J

    def c2_size(self, sys: FiberSystem, t, spec: SampleSpec = SampleSpec(n=256), h=1e-4) -> float:
        """Sampled C^2 size (values, first and second x-derivatives) at ``t``."""
        p, addr, x = _sample_states(sys, spec)
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x), self.t_dim))
        d0 = np.abs(self.delta(t, p, addr, x)).max()
        d1 = d2 = 0.0
        n = sys.fiber_dim
        f0 = self.delta(t, p, addr, x)
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            fp, fm = self.delta(t, p, addr, x + e), self.delta(t, p, addr, x - e)
            d1 = max(d1, np.abs((fp - fm) / (2 * h)).max())
            d2 = max(d2, np.abs((fp - 2 * f0 + fm) / h**2).max())
        return float(max(d0, d1, d2))


def apply_perturbation(sys: FiberSystem, pert: PerturbationFamily, t) -> FiberSystem:
    """The perturbed system ``f + delta(t, ...)``; rerun :func:`verify_unipotent` before use."""
    t = np.asarray(t, dtype=float).reshape(-1)
    if t.size != pert.t_dim:
        raise ContractError(f"t must have {pert.t_dim} components")

    def fmap(p, addr, x):
        tt = np.broadcast_to(t, (x.shape[0], pert.t_dim))
        return sys.fiber_map(p, addr, x) + pert.delta(tt, p, addr, x)

    def fjac(p, addr, x):
        tt = np.broadcast_to(t, (x.shape[0], pert.t_dim))
        return sys.fiber_jacobian(p, addr, x) + pert.jacobian(tt, p, addr, x)

    meta = {k: v for k, v in sys.meta.items() if k != "gamma_bounds"}
    meta["perturbed_from"] = sys.name
    out = FiberSystem(
        sys.alphabet, sys.fiber_dim, sys.param_dim, fmap, fjac, sys.address_depth, sys.domain_margin,
        sys.parameter_box, None, sys.name + "+pert", meta,
    )
    rep = containment_report(out)
    if not rep["passed"]:
        raise DomainError(f"perturbed maps no longer send X' inside X (max |image| = {rep['max_abs_image']:.6g})")
    return out


# distortion ---------------------------------------------------------------------


@dataclass
class DistortionReport:
    depths: list
    running_sup: dict  # name -> list of running sups per depth
    eta: float = 0.0
    eps_prime: float = 1.05

    def growth(self, name: str, lo: int = 10, hi: int = 30) -> float:
        vals = dict(zip(self.depths, self.running_sup[name]))
        return vals[hi] / vals[lo] - 1.0

    def to_dict(self):
        return {"depths": list(self.depths), "running_sup": {k: list(v) for k, v in self.running_sup.items()}, "eta": self.eta}


def _random_params(sys, g, m):
    box = sys.parameter_box
    return box[:, 0] + g.random((m, sys.param_dim)) * (box[:, 1] - box[:, 0])


def _loglam_rows(sys, p, base, words, x):
    """Per-row log eigenvalue products with per-row parameters."""
    m, n = words.shape
    ext = _extended_words(sys, words, base)
    D = sys.address_depth
    loglam = np.zeros(m)
    for j in range(n):
        y, J = sys._eval(p, ext[:, j : j + D], x)
        loglam += np.log(np.abs(J[:, 0, 0]))
        x = y
    return loglam


def distortion_suite(
    sys: FiberSystem,
    depths: Sequence[int] = tuple(range(1, 31)),
    n_words: int = 400,
    seed: int = 0,
    delta_p: float = 1e-3,
    perturbation: tuple | None = None,
    eps_prime: float = 1.05,
) -> DistortionReport:
    """Running sups of the four distortion ratios over sampled words.

    ``D1`` compares two points, ``D2`` two nearby parameters (after removing
    the ``eta * depth`` drift), ``D3`` two fiber addresses and ``D4`` a
    perturbed system given as ``(PerturbationFamily, t)``.
    """
    sys.require_unipotent()
    pert_sys = apply_perturbation(sys, *perturbation) if perturbation is not None else None
    if pert_sys is not None:
        pert_sys.require_unipotent()
    r = 1.0
    names = ["D1", "D2", "D3"] + (["D4"] if pert_sys is not None else [])
    sups = {k: [] for k in names}
    g0 = rngmod.stream(seed, rngmod.SYSTEMS, 0)
    need = sys.address_depth - 1
    m = n_words
    p1 = _random_params(sys, g0, m)
    direction = g0.normal(size=p1.shape)
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    p2 = np.clip(p1 + delta_p * direction, sys.outer_box()[:, 0], sys.outer_box()[:, 1])
    base1 = g0.integers(0, sys.k, need)
    base2 = (base1 + 1 + g0.integers(0, sys.k - 1, need)) % sys.k
    # per-letter drift in p sets eta
    xs = g0.uniform(-r, r, (m, sys.fiber_dim))
    letters = g0.integers(0, sys.k, (m, sys.address_depth))
    J1 = sys.fiber_jacobian(p1, letters, xs)
    J2 = sys.fiber_jacobian(p2, letters, xs)
    eta = float(np.abs(np.log(np.abs(J1[:, 0, 0])) - np.log(np.abs(J2[:, 0, 0]))).max())
    # nested words: the depth-m word is the first m letters of one long word
    long_words = g0.integers(0, sys.k, (m, max(depths)))
    x = g0.uniform(-r, r, (m, sys.fiber_dim))
    y = g0.uniform(-r, r, (m, sys.fiber_dim))
    run = {k: 1.0 for k in names}
    for depth in depths:
        words = long_words[:, :depth]
        a = _loglam_rows(sys, p1, base1, words, x)
        b = _loglam_rows(sys, p1, base1, words, y)
        run["D1"] = max(run["D1"], float(np.exp(np.abs(a - b).max())))
        c = _loglam_rows(sys, p2, base1, words, x)
        run["D2"] = max(run["D2"], float(np.exp(max(0.0, (np.abs(a - c) - eta * depth).max()))))
        e = _loglam_rows(sys, p1, base2, words, x)
        run["D3"] = max(run["D3"], float(np.exp(np.abs(a - e).max())))
        if pert_sys is not None:
            t = _loglam_rows(pert_sys, p1, base1, words, x)
            ratio = np.maximum(eps_prime * a - t, t - a / eps_prime)
            run["D4"] = max(run["D4"], float(np.exp(max(0.0, ratio.max()))))
        for k in names:
            sups[k].append(run[k])
    return DistortionReport(list(depths), sups, eta, eps_prime)


def offdiag_growth(sys: FiberSystem, p, depths=(2, 4, 8, 16, 32), n_words: int = 64, seed: int = 0) -> dict:
    """Empirical exponent ``e`` in ``max |offdiag(Dpsi)| / lambda ~ depth**e``."""
    sys.require_unipotent()
    if sys.fiber_dim == 1:
        return {"depths": list(depths), "ratios": [0.0] * len(depths), "exponent": 0.0}
    ratios = []
    base = np.zeros(sys.address_depth - 1, dtype=np.int64)
    for depth in depths:
        g = rngmod.stream(seed, rngmod.SYSTEMS, 1000 + depth)
        words = g.integers(0, sys.k, (n_words, depth))
        x = g.uniform(-1, 1, (n_words, sys.fiber_dim))
        _, loglam, jac = orbit(sys, p, base, words, x, with_jacobian=True)
        off = np.abs(np.tril(jac, -1)).max(axis=(1, 2))
        ratios.append(float((off / np.exp(loglam)).max()))
    lr = np.log(np.maximum(ratios, 1e-300))
    slope = float(np.polyfit(np.log(depths), lr, 1)[0]) if max(ratios) > 0 else 0.0
    return {"depths": list(depths), "ratios": ratios, "exponent": slope}


# constructors -------------------------------------------------------------------


def from_affine(family: AffineIfsFamily) -> FiberSystem:
    """The one-dimensional fiber system whose maps are the family's contractions."""
    if family.domain != (-1.0, 1.0):
        raise ContractError("fiber systems act on [-1, 1]; rescale the family first")

    def fmap(p, addr, x):
        s, b = family.coefficients(p)
        a = addr[:, :1]
        return np.take_along_axis(s, a, 1) * x + np.take_along_axis(b, a, 1)

    def fjac(p, addr, x):
        s, _ = family.coefficients(p)
        return np.take_along_axis(s, addr[:, :1], 1)[:, :, None]

    formula = family.meta.get("formula")
    lo, hi = family.gamma_bounds
    return FiberSystem(
        family.alphabet, 1, family.param_dim, fmap, fjac, 1, 0.05, family.parameter_box, formula,
        name=family.name, meta={"gamma_bounds": (lo, hi), "affine": True},
    )


@dataclass(frozen=True)
class SubsegmentSpec:
    """Layout of the blender's branch data.

    ``gap`` is the total length left between the base subsegments,
    ``heights`` the ``n + 1`` values for the degree-zero digit, ``unfold``
    the ``n + 1`` values for the higher digits and ``p_halfwidth`` the
    half-width of the parameter box around 0.
    """

    gap: float = 0.2
    heights: tuple | None = None
    unfold: tuple | None = None
    p_halfwidth: float = 0.025
    domain_margin: float = 0.01


@dataclass(frozen=True, eq=False)
class Section3Blender:
    n: int
    d: int
    s: int
    delta: int
    n_branches: int
    subsegments: np.ndarray
    digits: np.ndarray  # (n_branches, delta) digit of each branch per multi-index
    digit_values: np.ndarray  # (n_branches, delta) value of each digit
    fiber: FiberSystem

    @property
    def base_slopes(self) -> np.ndarray:
        return 2.0 / (self.subsegments[:, 1] - self.subsegments[:, 0])

    def branch_of(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        j = np.searchsorted(self.subsegments[:, 0], x, side="right") - 1
        j = np.clip(j, 0, self.n_branches - 1)
        inside = (x >= self.subsegments[j, 0]) & (x <= self.subsegments[j, 1])
        return np.where(inside, j, -1)

    def g(self, x):
        """The expanding base map; NaN outside the subsegments."""
        x = np.asarray(x, dtype=float)
        j = self.branch_of(x)
        jj = np.maximum(j, 0)
        out = -1.0 + self.base_slopes[jj] * (x - self.subsegments[jj, 0])
        return np.where(j >= 0, out, np.nan)

    def heights(self, p) -> np.ndarray:
        """``r_j(p)`` for all branches, shape ``p.shape[:-1] + (n_branches,)``."""
        p = np.asarray(p, dtype=float)
        monos = _monomials([p[..., i] for i in range(self.d)], self.d, self.s)
        return sum(self.digit_values[:, g] * np.asarray(monos[g])[..., None] for g in range(self.delta))

    def F(self, x, y, p=None):
        """The planar endomorphism ``(x, y) -> (g(x), y / n + r_j(p))`` on the branch domains."""
        p = np.zeros(self.d) if p is None else np.asarray(p, dtype=float)
        j = self.branch_of(x)
        r = self.heights(p)
        return self.g(x), np.where(j >= 0, np.asarray(y) / self.n + r[np.maximum(j, 0)], np.nan)

    def entropy(self) -> dict:
        """Entropy against contraction, compared exactly in integers."""
        return {
            "n_branches": self.n_branches,
            "entropy": math.log(self.n_branches),
            "contraction_log": math.log(self.n),
            "ratio": math.log(self.n_branches) / math.log(self.n),
            "delta": self.delta,
            "entropy_exceeds_contraction": self.n_branches > self.n,
            "ratio_exceeds_delta": self.n_branches > self.n**self.delta,
        }

    def unstable_heights(self, depth: int, p=None) -> np.ndarray:
        """Heights of the horizontal unstable pieces after ``depth`` backward steps.

        Starts from the fixed point of branch 0, so the sets are nested in the depth.
        """
        p = np.zeros(self.d) if p is None else np.asarray(p, dtype=float)
        r = self.heights(p)
        y = np.array([r[0] / (1.0 - 1.0 / self.n)])
        for _ in range(depth):
            y = (y[None, :] / self.n + r[:, None]).ravel()
            y = np.unique(y)
        return y

    def unstable_occupancy(self, depths, grid: int = 256, p=None) -> list:
        """Fraction of a ``grid x grid`` partition of ``X^2`` met by the unstable union."""
        out = []
        for depth in depths:
            y = self.unstable_heights(depth, p)
            rows = np.unique(np.clip(((y + 1.0) / 2.0 * grid).astype(int), 0, grid - 1))
            # every horizontal piece spans the full base interval
            out.append(len(rows) * grid / grid**2)
        return out


def _monomials(p_cols, d, s):
    """``p**g / g!`` for every multi-index ``g``, in graded order."""
    out = []
    for g in multi_indices(d, s):
        term = 1.0
        for i, e in enumerate(g):
            if e:
                term = term * p_cols[i] ** e * (1.0 / math.factorial(e))
        out.append(term)
    return out


def build_section3_blender(n: int, d: int = 1, s: int = 0, spec: SubsegmentSpec | None = None) -> Section3Blender:
    """The planar blender ``(x, y) -> (g(x), y / n + h(x))`` and its vertical fiber system.

    Branch ``j`` is labelled by one base-``(n + 1)`` digit per multi-index
    ``g`` with ``|g| <= s``.  Its height is
    ``r_j(p) = sum_g value(digit_g) p**g / g!``, so the ``g``-th parameter
    derivative of the heights at ``p = 0`` runs through all digits.  There are
    ``(n + 1)**delta`` branches, ``delta = C(d + s, d)``.
    """
    spec = spec or SubsegmentSpec()
    if int(n) != n or n < 2:
        raise InvariantViolation("the blender needs an integer n >= 2")
    n = int(n)
    idx = multi_indices(d, s)
    delta = len(idx)
    nb = (n + 1) ** delta
    top = 1.0 - 1.0 / n
    heights = np.asarray(spec.heights if spec.heights is not None else [(i + 1) / (n + 2) * top for i in range(n + 1)])
    unfold = np.asarray(spec.unfold if spec.unfold is not None else np.linspace(-2.0, 2.0, n + 1))
    if heights.shape != (n + 1,) or unfold.shape != (n + 1,):
        raise InvariantViolation("heights and unfold need n + 1 values each")
    # subsegments of [-1, 1]
    if not 0.0 < spec.gap < 2.0:
        raise InvariantViolation("gap must lie in (0, 2)")
    length = (2.0 - spec.gap) / nb
    space = spec.gap / (nb + 1)
    lo = -1.0 + space + np.arange(nb) * (length + space)
    subsegments = np.stack([lo, lo + length], axis=1)
    if np.any(np.diff(subsegments.ravel()) <= 0):
        raise InvariantViolation("subsegments overlap")
    digits = (np.arange(nb)[:, None] // (n + 1) ** np.arange(delta - 1, -1, -1)[None, :]) % (n + 1)
    values = np.where(np.arange(delta)[None, :] == 0, heights[digits], unfold[digits])
    box = np.array([[-spec.p_halfwidth, spec.p_halfwidth]] * d)
    # heights must stay in (0, 1 - 1/n) on the parameter box
    corners = np.stack(np.meshgrid(*box, indexing="ij"), axis=-1).reshape(-1, d)
    probe = np.concatenate([corners, np.zeros((1, d))])
    monos = np.stack([np.broadcast_to(m, probe.shape[:1]) for m in _monomials([probe[:, i] for i in range(d)], d, s)], axis=1)
    r = monos @ values.T
    if np.any(r <= 0.0) or np.any(r >= top):
        raise InvariantViolation("branch heights leave (0, 1 - 1/n) on the parameter box")
    coeff = values

    def formula(p_cols, addr, x_cols):
        j = addr[:, 0]
        monos = _monomials(p_cols, d, s)
        r = 0.0
        for gi in range(delta):
            r = r + coeff[j, gi] * monos[gi] if gi else r + coeff[j, 0]
        return [x_cols[0] * (1.0 / n) + r]

    fiber = FiberSystem.from_formula(
        formula, Alphabet(nb), 1, d, address_depth=1, domain_margin=spec.domain_margin, parameter_box=box,
        name=f"section3(n={n},d={d},s={s})", meta={"gamma_bounds": (1.0 / n * (1 - 1e-9), 1.0 / n * (1 + 1e-9))},
    )
    return Section3Blender(n, d, s, delta, nb, subsegments, digits, values, fiber)


# sample nonlinear systems used by the distortion and Gibbs suites --------------


def nonlinear_test_system(kind: str = "sine", param_dim: int = 1) -> FiberSystem:
    """Small nonlinear systems satisfying (U).

    ``"sine"``: ``x -> c_a x + b_a + eps sin(x + p)`` on a one-dimensional fiber.
    ``"quadratic"``: three maps with a quadratic term depending on ``p``.
    ``"planar"``: ``(x1, x2) -> (g(x1), g'(x1) x2 + h(x1))`` with a nonlinear ``g``.
    """
    if kind == "sine":
        cs = np.array([0.42, 0.38])
        bs = np.array([-0.45, 0.45])

        def formula(p, addr, x):
            a = addr[:, 0]
            return [cs[a] * x[0] + bs[a] + 0.08 * MIXED_FUNCS["sin"](x[0] + p[0])]

        return FiberSystem.from_formula(formula, Alphabet(2), 1, 1, parameter_box=[[0.0, 0.5]], name="sine")
    if kind == "quadratic":
        cs = np.array([0.3, 0.35, 0.3])
        bs = np.array([-0.55, 0.0, 0.55])

        def formula(p, addr, x):
            a = addr[:, 0]
            return [cs[a] * x[0] + bs[a] + 0.05 * (x[0] * x[0]) * (1.0 + p[0])]

        return FiberSystem.from_formula(formula, Alphabet(3), 1, 1, parameter_box=[[0.0, 1.0]], name="quadratic")
    if kind == "planar":
        cs = np.array([0.35, 0.4])
        bs = np.array([-0.5, 0.5])

        def formula(p, addr, x):
            a = addr[:, 0]
            u = x[0]
            g = cs[a] * u + bs[a] + 0.04 * u * u
            dg = cs[a] + 0.08 * u
            return [g, dg * x[1] + 0.2 * u * (1.0 + p[0]) + 0.1 * bs[a]]

        return FiberSystem.from_formula(formula, Alphabet(2), 2, 1, parameter_box=[[0.0, 0.5]], name="planar")
    if kind == "address":
        cs = np.array([0.4, 0.36])
        bs = np.array([-0.45, 0.45])

        def formula(p, addr, x):
            a, nxt = addr[:, 0], addr[:, 1]
            return [(cs[a] + 0.02 * nxt) * x[0] + bs[a] + 0.05 * x[0] * x[0] + 0.05 * p[0]]

        return FiberSystem.from_formula(formula, Alphabet(2), 1, 1, address_depth=2, parameter_box=[[0.0, 0.5]], name="address")
    raise ContractError(f"unknown test system {kind!r}")
