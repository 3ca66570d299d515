"""Parameter jets of fiber points and the induced action on them.

A jet of order ``s`` at ``p0`` of a curve ``p -> x_p`` is the list of raw
partial derivatives ``d^g x / dp^g`` at ``p0`` for all multi-indices
``|g| <= s``, in graded order.  Transporting a jet under ``x -> f_p(x)``
composes truncated Taylor series.

Families know how to evaluate ``f_{p0 + h}(x(h))`` and ``df/dx`` along the
same series:

* :class:`ExprFamily` from restricted-grammar expressions,
* :class:`FormulaFamily` from arithmetic functions (as used by fiber systems),
* :class:`PartialsFamily` from an oracle of partial derivatives,
* :class:`CallableFamily` from a plain function, by finite differences.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import CapabilityError, ContractError
from .expr import Expression
from .skewprod import FiberSystem, SampleSpec, _sample_states, select, unipotency_of_jacobians
from .taylor import MIXED_FUNCS, TaylorSeries, multi_indices


def jet_dimension(d: int, s: int) -> int:
    """Number of multi-indices in ``d`` variables of total degree at most ``s``."""
    if d < 1 or s < 0:
        raise ContractError("jet_dimension needs d >= 1 and s >= 0")
    return math.comb(d + s, d)


@dataclass(frozen=True)
class JetIndexSet:
    d: int
    s: int

    def __post_init__(self):
        jet_dimension(self.d, self.s)

    @cached_property
    def multi_indices(self) -> tuple:
        return multi_indices(self.d, self.s)

    @property
    def size(self) -> int:
        return len(self.multi_indices)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([sum(g) for g in self.multi_indices])

    @cached_property
    def factorials(self) -> np.ndarray:
        return np.array([math.prod(math.factorial(e) for e in g) for g in self.multi_indices], dtype=float)

    def position(self, g) -> int:
        return self.multi_indices.index(tuple(g))


@dataclass(frozen=True)
class JetVector:
    """Raw partial derivatives of a scalar curve in graded order."""

    index_set: JetIndexSet
    coeffs: np.ndarray
    basepoint: tuple

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape[0] != self.index_set.size:
            raise ContractError(f"jet needs {self.index_set.size} coefficients, got {c.shape[0]}")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "basepoint", tuple(float(v) for v in np.asarray(self.basepoint).reshape(-1)))
        if len(self.basepoint) != self.index_set.d:
            raise ContractError("basepoint dimension does not match the index set")

    @property
    def value(self) -> float:
        return float(self.coeffs[0])

    def taylor_coefficients(self) -> np.ndarray:
        return self.coeffs / self.index_set.factorials

    def to_dict(self):
        return {
            "d": self.index_set.d,
            "s": self.index_set.s,
            "multi_indices": [list(g) for g in self.index_set.multi_indices],
            "basepoint": list(self.basepoint),
            "derivatives": [float(v) for v in self.coeffs],
        }


# families -------------------------------------------------------------------


def _param_series(p0, d, s, n_vars=None):
    """Series ``p0_i + h_i``; ``n_vars`` allows extra trailing variables."""
    p0 = np.asarray(p0, dtype=float)
    n_vars = d if n_vars is None else n_vars
    return [TaylorSeries.variable(p0[..., i], i, n_vars, s) for i in range(d)]


def _embed(xs: TaylorSeries, d_new: int, s_new: int) -> TaylorSeries:
    """Reinterpret a series in ``d`` variables as one in more variables / higher order."""
    src = multi_indices(xs.d, xs.s)
    dst = {g: i for i, g in enumerate(multi_indices(d_new, s_new))}
    c = np.zeros(xs.batch_shape + (len(dst),))
    for i, g in enumerate(src):
        c[..., dst[g + (0,) * (d_new - xs.d)]] = xs.coeffs[..., i]
    return TaylorSeries(c, d_new, s_new)


def _extract_dx(series: TaylorSeries, d: int, s: int) -> TaylorSeries:
    """From a series in ``(h, u)`` take the coefficient of ``u**1`` as a series in ``h``."""
    pos = {g: i for i, g in enumerate(multi_indices(d + 1, s + 1))}
    idx = [pos[g + (1,)] for g in multi_indices(d, s)]
    return TaylorSeries(series.coeffs[..., idx], d, s)


class _Family:
    d: int
    max_order: int | None = None

    def series(self, p0, addr, xs: TaylorSeries) -> TaylorSeries:
        raise NotImplementedError

    def dx_series(self, p0, addr, xs: TaylorSeries) -> TaylorSeries:
        raise NotImplementedError

    def _check_order(self, order):
        if self.max_order is not None and order > self.max_order:
            raise CapabilityError(f"derivatives of order {order} requested, family supports {self.max_order}")


@dataclass(frozen=True, eq=False)
class FormulaFamily(_Family):
    """``formula(p_cols, addr, x_cols) -> [f]`` written with arithmetic operations."""

    formula: object
    d: int

    def series(self, p0, addr, xs):
        ps = _param_series(p0, self.d, xs.s)
        return self._lift(self.formula(ps, addr, [xs])[0], xs)

    def dx_series(self, p0, addr, xs):
        d, s = self.d, xs.s
        ps = _param_series(p0, d, s + 1, n_vars=d + 1)
        x = _embed(xs, d + 1, s + 1) + TaylorSeries.variable(np.zeros(xs.batch_shape), d, d + 1, s + 1)
        out = self._lift(self.formula(ps, addr, [x])[0], x)
        return _extract_dx(out, d, s)

    @staticmethod
    def _lift(v, ref):
        if isinstance(v, TaylorSeries):
            return v
        return TaylorSeries.constant(np.broadcast_to(v, ref.batch_shape), ref.d, ref.s)


def _expr_formula(exprs: list, d: int):
    def formula(p_cols, addr, x_cols):
        env = {f"p{i + 1}": p_cols[i] for i in range(d)}
        env["x1"] = x_cols[0]
        if addr is not None:
            addr = np.asarray(addr)
            for j in range(addr.shape[-1]):
                env[f"a{j}"] = addr[..., j].astype(float)
        values = [e.evaluate(env, MIXED_FUNCS) for e in exprs]
        if len(values) == 1:
            return [values[0]]
        return [select(addr[..., 0], values)]

    return formula


@dataclass(frozen=True, eq=False)
class ExprFamily(FormulaFamily):
    """Expressions in ``p1..pd``, ``x`` and ``a0, a1, ...``; one per letter or one shared."""

    def __init__(self, exprs, d: int):
        if isinstance(exprs, (Expression, str)):
            exprs = [exprs]
        from .expr import parse

        exprs = [parse(e) if isinstance(e, str) else e for e in exprs]
        object.__setattr__(self, "exprs", exprs)
        object.__setattr__(self, "formula", _expr_formula(exprs, d))
        object.__setattr__(self, "d", d)


@dataclass(frozen=True, eq=False)
class PartialsFamily(_Family):
    """Family given by raw partials ``d_p^g d_x^k f`` at the expansion point.

    ``partials(p0, addr, x0, order)`` returns a dict mapping ``(g, k)`` to
    arrays, for all ``|g| + k <= order``.
    """

    partials: object
    d: int
    max_order: int | None = None

    def _expand(self, p0, addr, xs, shift):
        s = xs.s
        order = s + shift
        self._check_order(order)
        x0 = xs.value
        P = self.partials(np.asarray(p0, dtype=float), addr, x0, order)
        u = xs - x0
        hs = _param_series(np.zeros_like(np.asarray(p0, dtype=float)), self.d, s)
        out = TaylorSeries.constant(np.zeros(xs.batch_shape), self.d, s)
        upow = [TaylorSeries.constant(np.ones(xs.batch_shape), self.d, s)]
        for k in range(1, s + 1):
            upow.append(upow[-1] * u)
        for g in multi_indices(self.d, s):
            mono = TaylorSeries.constant(np.ones(xs.batch_shape), self.d, s)
            for i, e in enumerate(g):
                if e:
                    mono = mono * hs[i] ** e
            gf = math.prod(math.factorial(e) for e in g)
            for k in range(0, s - sum(g) + 1):
                val = P.get((g, k + shift))
                if val is None:
                    raise CapabilityError(f"partial {(g, k + shift)} missing from the oracle")
                out = out + mono * upow[k] * (np.asarray(val) / (gf * math.factorial(k)))
        return out

    def series(self, p0, addr, xs):
        return self._expand(p0, addr, xs, 0)

    def dx_series(self, p0, addr, xs):
        return self._expand(p0, addr, xs, 1)


def _fd_step(order: int) -> float:
    # balances O(h^4) truncation after one Richardson step against eps / h^order rounding
    return float(np.finfo(float).eps ** (1.0 / (order + 4)))


def _central(f, point, alpha, h):
    """Tensor central difference for the multi-index ``alpha`` with step ``h``."""
    stencils = []
    for m in alpha:
        offs = [(m / 2.0 - j) * h for j in range(m + 1)]
        wts = [(-1) ** j * math.comb(m, j) for j in range(m + 1)]
        stencils.append(list(zip(offs, wts)))
    total = 0.0
    for combo in itertools.product(*stencils):
        shift = np.array([o for o, _ in combo])
        w = math.prod(wt for _, wt in combo)
        total = total + w * f(point + shift)
    return total / h ** sum(alpha)


def fd_partials(f, point, alpha) -> np.ndarray:
    """Richardson-refined central difference of ``f`` at ``point`` (last axis = variables)."""
    m = sum(alpha)
    if m == 0:
        return f(point)
    h = _fd_step(m)
    coarse = _central(f, point, alpha, h)
    fine = _central(f, point, alpha, h / 2)
    return (4.0 * fine - coarse) / 3.0


@dataclass(frozen=True, eq=False)
class CallableFamily(PartialsFamily):
    """A plain vectorized ``f(p, addr, x)`` differentiated numerically.

    Orders above ``max_order`` raise :class:`CapabilityError`.
    """

    def __init__(self, f, d: int, max_order: int = 4):
        def partials(p0, addr, x0, order):
            point = np.concatenate([np.atleast_2d(p0), np.asarray(x0).reshape(-1, 1)], axis=-1)

            def g(z):
                return f(z[..., :d], addr, z[..., d])

            out = {}
            for tot in range(order + 1):
                for a in multi_indices(d + 1, tot):
                    if sum(a) != tot:
                        continue
                    out[(a[:d], a[d])] = fd_partials(g, point, a)
            return out

        object.__setattr__(self, "partials", partials)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "max_order", max_order)


def jet_transport(family, p0, jet: JetVector, addr=None) -> JetVector:
    """Jet of ``p -> f_p(x_p)`` at ``p0`` from the jet of ``p -> x_p``."""
    iset = jet.index_set
    p0 = np.asarray(p0, dtype=float).reshape(-1)
    if not np.allclose(p0, jet.basepoint, rtol=0, atol=0):
        raise ContractError("jet basepoint differs from p0")
    xs = TaylorSeries.from_derivatives(jet.coeffs[None], iset.d, iset.s)
    a = None if addr is None else np.asarray(addr).reshape(1, -1)
    out = family.series(p0[None], a, xs)
    return JetVector(iset, out.derivatives()[0], p0)


def transport_batch(family, p0, coeffs, addr=None, d=None, s=None):
    """Batched jet transport on raw-derivative arrays of shape ``(M, delta)``."""
    xs = TaylorSeries.from_derivatives(coeffs, d, s)
    return family.series(p0, addr, xs).derivatives()


# induced systems -------------------------------------------------------------


@dataclass(frozen=True)
class _JacobianPattern:
    rows: np.ndarray
    cols: np.ndarray
    diffs: np.ndarray
    factors: np.ndarray


def _jacobian_pattern(d, s) -> _JacobianPattern:
    idx = multi_indices(d, s)
    pos = {g: i for i, g in enumerate(idx)}
    rows, cols, diffs, factors = [], [], [], []
    for i, g in enumerate(idx):
        for j, b in enumerate(idx):
            if all(bb <= gg for bb, gg in zip(b, g)):
                diff = tuple(gg - bb for gg, bb in zip(g, b))
                fg = math.prod(math.factorial(e) for e in g)
                fb = math.prod(math.factorial(e) for e in b)
                rows.append(i)
                cols.append(j)
                diffs.append(pos[diff])
                factors.append(fg / fb)
    return _JacobianPattern(np.array(rows), np.array(cols), np.array(diffs), np.array(factors))


def family_of(sys: FiberSystem):
    """The jet family behind a one-dimensional fiber system."""
    if sys.fiber_dim != 1:
        raise ContractError("jets are induced from one-dimensional fiber systems")
    if sys.formula is not None:
        return FormulaFamily(sys.formula, sys.param_dim)

    def f(p, addr, x):
        return sys.fiber_map(np.broadcast_to(p, (x.shape[0], sys.param_dim)), addr, x[:, None])[:, 0]

    return CallableFamily(f, sys.param_dim)


def induced_jet_system(
    sys: FiberSystem,
    s: int,
    R1: float = 8.0,
    factor: float = 8.0,
    max_doublings: int = 10,
    check: SampleSpec = SampleSpec(n=1000, seed=0),
) -> FiberSystem:
    """The fiber system acting on rescaled ``s``-jets of fiber points.

    The state ``z`` lives in ``[-1, 1]^delta``; the jet coordinate of degree
    ``i`` is ``R_i z`` with ``R_0 = 1``, ``R_1 = R1`` and ``R_{i+1} = factor R_i``.
    The radii are doubled until sampled images stay inside the cube.
    """
    if s < 0:
        raise ContractError("jet order must be nonnegative")
    family = family_of(sys)
    d = sys.param_dim
    iset = JetIndexSet(d, s)
    pattern = _jacobian_pattern(d, s)
    degrees = iset.degrees
    R1_now = R1
    for attempt in range(max_doublings + 1):
        radii = np.array([1.0] + [R1_now * factor ** (i - 1) for i in range(1, s + 1)])
        Rvec = radii[degrees]
        out = _make_induced(sys, family, iset, pattern, Rvec, radii)
        rep = _containment(out, check)
        if rep["passed"]:
            break
        R1_now *= 2.0
    else:
        raise ContractError(f"jet box containment failed after {max_doublings} doublings: {rep}")
    out.meta["containment"] = rep
    u = out.unipotency
    if not u.passed:
        raise ContractError(f"induced jet system fails (U): {u.to_dict()}")
    return out


def _make_induced(sys, family, iset, pattern, Rvec, radii):
    d, s = iset.d, iset.s
    delta = iset.size

    def to_series(z):
        return TaylorSeries.from_derivatives(z * Rvec, d, s)

    def fmap(p, addr, z):
        out = family.series(p, addr, to_series(z))
        return out.derivatives() / Rvec

    def fjac(p, addr, z):
        G = family.dx_series(p, addr, to_series(z)).coeffs
        J = np.zeros((z.shape[0], delta, delta))
        vals = G[:, pattern.diffs] * pattern.factors * Rvec[pattern.cols] / Rvec[pattern.rows]
        J[:, pattern.rows, pattern.cols] = vals
        return J

    meta = {
        "jet_order": s,
        "radii": [float(r) for r in radii],
        "base": sys.name,
        "base_system": sys,
        "lambda_grid": 2 if sys.meta.get("affine") or sys.meta.get("constant_diagonal") else None,
    }
    if "gamma_bounds" in sys.meta:
        meta["gamma_bounds"] = sys.meta["gamma_bounds"]
    if sys.meta.get("affine"):
        meta["constant_diagonal"] = True
    return FiberSystem(
        sys.alphabet, delta, d, fmap, fjac, sys.address_depth, sys.domain_margin, sys.parameter_box,
        None, f"jets(s={s})[{sys.name}]", meta,
    )


def _containment(out: FiberSystem, spec: SampleSpec) -> dict:
    p, addr, z = _sample_states(out, spec)
    r = out.outer_radius
    # include the extreme corners of the box along every axis pair
    z[: min(len(z), 2)] = np.array([[r] * out.fiber_dim, [-r] * out.fiber_dim])[: min(len(z), 2)]
    y = out.fiber_map(p, addr, z)
    worst = float(np.abs(y).max())
    return {"max_abs_image": worst, "passed": worst < 1.0}


def induced_structure_report(induced: FiberSystem, spec: SampleSpec = SampleSpec(n=1000, seed=3)) -> dict:
    """Triangularity, diagonal spread and agreement of the diagonal with the base derivative."""
    base: FiberSystem = induced.meta["base_system"]
    p, addr, z = _sample_states(induced, spec)
    J = induced.fiber_jacobian(p, addr, z)
    rep = unipotency_of_jacobians(J)
    x0 = z[:, :1]
    base_deriv = base.fiber_jacobian(p, addr, x0)[:, 0, 0]
    diag_err = float(np.abs(np.diagonal(J, axis1=1, axis2=2) - base_deriv[:, None]).max())
    return {
        "max_upper": rep.max_upper_violation,
        "diag_spread": rep.max_diag_spread,
        "diag_vs_base": diag_err,
        "eig_range": list(rep.eig_range),
        "n_samples": rep.n_samples,
    }


def jet_set_sampler(induced: FiberSystem, gibbs, p0, n_atoms: int, seed: int, coding_depth: int | None = None, fiber_addr=()):
    """Empirical measure on coded jets (atoms in the rescaled jet cube)."""
    from .measure_lab import pushforward

    induced.require_unipotent()
    return pushforward(induced, p0, fiber_addr, gibbs, n_atoms, seed, coding_depth)


def fubini_verdict(*factor_verdicts: bool) -> bool:
    """Positive measure of a product set from the verdicts of its factors."""
    return all(bool(v) for v in factor_verdicts)
