"""Parameterized families of affine contractions of an interval.

The default interval is ``X = [-1, 1]``.  A family is described by a
vectorized builder ``(p, a) -> (slope, offset)`` where ``p`` has shape
``(..., d)``; everything downstream (coding, pressure, scans) evaluates the
builder on whole parameter batches at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .errors import ContractError, DomainError, InvariantViolation
from .symbolic import Alphabet, FiniteWord

DEFAULT_CODING_DEPTH = 60


@dataclass(frozen=True)
class AffineContraction:
    """``x -> slope * x + offset``; ``(1, 0)`` is the identity and is always allowed."""

    slope: float
    offset: float
    domain: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if self.is_identity:
            return
        if not 0.0 < abs(self.slope) < 1.0:
            raise InvariantViolation(f"slope {self.slope} is not a contraction")
        lo, hi = self.domain
        a, b = sorted((self.slope * lo + self.offset, self.slope * hi + self.offset))
        if not (lo < a and b < hi) and not self._degenerate_ok(lo, hi, a, b):
            raise InvariantViolation(f"map {self.slope}x{self.offset:+} does not send X strictly inside X")

    @staticmethod
    def _degenerate_ok(lo, hi, a, b):
        # long compositions can round onto the boundary at machine precision
        tol = 1e-14 * (hi - lo)
        return lo - tol <= a and b <= hi + tol and (b - a) < 1e-12 * (hi - lo)

    @property
    def is_identity(self):
        return self.slope == 1.0 and self.offset == 0.0

    def __call__(self, x):
        return self.slope * np.asarray(x) + self.offset

    def then(self, outer: "AffineContraction") -> "AffineContraction":
        """``outer o self``."""
        return AffineContraction(outer.slope * self.slope, outer.slope * self.offset + outer.offset, self.domain)

    def fixed_point(self) -> float:
        return self.offset / (1.0 - self.slope)


@dataclass(frozen=True)
class CodedPoint:
    value: object
    error_bound: float
    depth: int


def _as_box(box) -> np.ndarray:
    box = np.atleast_2d(np.asarray(box, dtype=float))
    if box.shape[-1] != 2 or np.any(box[:, 0] > box[:, 1]):
        raise InvariantViolation("parameter box must be a list of (lo, hi) pairs with lo <= hi")
    return box


@dataclass(frozen=True, eq=False)
class AffineIfsFamily:
    """A family ``p -> {psi_p^a}`` of affine contractions.

    Parameters
    ----------
    alphabet : Alphabet
    map_builder : callable
        ``map_builder(p, a)`` with ``p`` of shape ``(..., d)`` returns
        ``(slope, offset)`` arrays of shape ``(...)``.
    parameter_box : array_like
        ``(d, 2)`` array of closed intervals.
    gamma_bounds : (float, float)
        Strict bounds on ``|slope|`` over the box.
    margin : float
        Relative inflation of the box defining the open neighbourhood where
        the maps are still evaluated.
    domain : (float, float)
        The interval the maps act on.
    """

    alphabet: Alphabet
    map_builder: Callable
    parameter_box: np.ndarray
    gamma_bounds: tuple
    margin: float = 0.05
    domain: tuple = (-1.0, 1.0)
    name: str = "affine"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "parameter_box", _as_box(self.parameter_box))
        lo, hi = self.gamma_bounds
        if not 0.0 < lo < hi < 1.0:
            raise InvariantViolation(f"gamma bounds {self.gamma_bounds} must satisfy 0 < lo < hi < 1")
        self._check_samples()

    @property
    def k(self) -> int:
        return self.alphabet.size

    @property
    def param_dim(self) -> int:
        return self.parameter_box.shape[0]

    @property
    def fiber_dim(self) -> int:
        return 1

    @property
    def gamma_hi(self) -> float:
        return self.gamma_bounds[1]

    @property
    def diameter(self) -> float:
        return self.domain[1] - self.domain[0]

    def outer_box(self) -> np.ndarray:
        w = self.parameter_box[:, 1] - self.parameter_box[:, 0]
        return np.stack([self.parameter_box[:, 0] - self.margin * w, self.parameter_box[:, 1] + self.margin * w], axis=1)

    def check_parameter(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.ndim == 0:
            p = p[None]
        if p.shape[-1] != self.param_dim:
            raise ContractError(f"parameter has dimension {p.shape[-1]}, family expects {self.param_dim}")
        box = self.outer_box()
        tol = 1e-12 * max(1.0, float(np.abs(box).max()))
        if np.any(p < box[:, 0] - tol) or np.any(p > box[:, 1] + tol):
            raise DomainError("parameter outside the neighbourhood of the parameter box")
        return p

    def coefficients(self, p):
        """Slopes and offsets of all letters, arrays of shape ``p.shape[:-1] + (k,)``."""
        p = self.check_parameter(p)
        slopes, offsets = [], []
        for a in range(self.k):
            s, b = self.map_builder(p, a)
            shape = p.shape[:-1]
            slopes.append(np.broadcast_to(np.asarray(s, dtype=float), shape))
            offsets.append(np.broadcast_to(np.asarray(b, dtype=float), shape))
        return np.stack(slopes, axis=-1), np.stack(offsets, axis=-1)

    def contraction(self, p, a: int) -> AffineContraction:
        if a not in self.alphabet:
            raise InvariantViolation(f"letter {a} outside alphabet")
        p = self.check_parameter(p)
        s, b = self.map_builder(p, a)
        return AffineContraction(float(np.squeeze(s)), float(np.squeeze(b)), self.domain)

    def _check_samples(self, n: int = 9):
        box = self.outer_box()
        axes = [np.linspace(lo, hi, n if hi > lo else 1) for lo, hi in box]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.param_dim)
        slopes, offsets = self.coefficients(grid)
        lo, hi = self.gamma_bounds
        inner = self.check_parameter(grid)
        inside = np.all((inner >= self.parameter_box[:, 0]) & (inner <= self.parameter_box[:, 1]), axis=-1)
        mag = np.abs(slopes[inside])
        if mag.size and (mag.min() <= lo or mag.max() >= hi):
            raise InvariantViolation("slopes leave the gamma bounds on the parameter box")
        dlo, dhi = self.domain
        ends = np.stack([slopes * dlo + offsets, slopes * dhi + offsets])
        if np.any(ends.min(axis=0) <= dlo) or np.any(ends.max(axis=0) >= dhi):
            raise InvariantViolation("some map does not send X strictly inside X on the parameter neighbourhood")

    def continuity_report(self, n_segments: int = 64, step: float = 1e-3, seed: int = 0) -> dict:
        """Sampled check that slopes and offsets move at most Lipschitz-like in ``p``."""
        rng = rngmod.stream(seed, rngmod.CHECKS)
        box = self.parameter_box
        p = box[:, 0] + rng.random((n_segments, self.param_dim)) * (box[:, 1] - box[:, 0])
        direction = rng.normal(size=p.shape)
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        s0, b0 = self.coefficients(p)
        s1, b1 = self.coefficients(p + step * direction)
        s2, b2 = self.coefficients(p + 0.5 * step * direction)
        big = np.maximum(np.abs(s1 - s0), np.abs(b1 - b0)).max()
        half = np.maximum(np.abs(s2 - s0), np.abs(b2 - b0)).max()
        lipschitz = big / step
        # continuity: halving the step must not leave a jump behind
        ok = bool(half <= 0.75 * big + 1e-12 or big <= 1e-12)
        return {"lipschitz_estimate": float(lipschitz), "variation": float(big), "half_step_variation": float(half), "continuous": ok}

    def compose(self, p, alpha: FiniteWord) -> AffineContraction:
        """``psi^{a_{-1}} o ... o psi^{a_{-n}}``; the empty word gives the identity."""
        if alpha.orientation != "backward":
            raise ContractError("compose expects a backward word")
        if not len(alpha):
            return AffineContraction(1.0, 0.0, self.domain)
        alpha.check_alphabet(self.alphabet)
        slopes, offsets = self.coefficients(p)
        slopes, offsets = slopes.reshape(-1), offsets.reshape(-1)
        s, b = 1.0, 0.0
        for a in alpha.letters:  # farthest letter acts first
            s, b = slopes[a] * s, slopes[a] * b + offsets[a]
        return AffineContraction(float(s), float(b), self.domain)

    def code_point(self, p, alpha: FiniteWord, depth: int | None = None) -> CodedPoint:
        """``psi^{alpha|n}(0)`` and the bound ``diam(X) * gamma_hi**n`` on its distance to the limit."""
        if depth is None:
            depth = DEFAULT_CODING_DEPTH if alpha.is_infinite else len(alpha)
        head = alpha.prefix(depth).check_alphabet(self.alphabet)
        slopes, offsets = self.coefficients(p)
        slopes, offsets = slopes.reshape(-1), offsets.reshape(-1)
        # iterate the value directly; composite slopes of long words underflow
        x = 0.0
        for a in head.letters:
            x = slopes[a] * x + offsets[a]
        return CodedPoint(float(x), self.diameter * self.gamma_hi**depth, depth)

    def code_batch(self, p, words) -> np.ndarray:
        """Vectorized coding.

        Parameters
        ----------
        p : array_like
            Parameters broadcastable against the word batch, shape ``(..., d)``.
        words : array_like of int
            Backward words, shape ``(..., n)``; the last column is the letter
            at index -1.

        Returns
        -------
        ndarray
            ``psi_p^{w}(0)`` for every word, broadcast over the batch.
        """
        words = np.asarray(words)
        slopes, offsets = self.coefficients(p)
        batch = np.broadcast_shapes(slopes.shape[:-1], words.shape[:-1])
        slopes = np.broadcast_to(slopes, batch + (self.k,))
        offsets = np.broadcast_to(offsets, batch + (self.k,))
        words = np.broadcast_to(words, batch + (words.shape[-1],))
        x = np.zeros(batch)
        for j in range(words.shape[-1]):
            a = words[..., j][..., None]
            x = np.take_along_axis(slopes, a, -1)[..., 0] * x + np.take_along_axis(offsets, a, -1)[..., 0]
        return x

    def log_slopes(self, p) -> np.ndarray:
        slopes, _ = self.coefficients(p)
        return np.log(np.abs(slopes))


def from_constant_maps(slopes, offsets, domain=(-1.0, 1.0), name="constant") -> AffineIfsFamily:
    """A parameter-independent family (trivial one-point box)."""
    slopes = np.asarray(slopes, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    mags = np.abs(slopes)
    lo, hi = mags.min(), mags.max()

    def builder(p, a):
        shape = np.shape(p)[:-1]
        return np.full(shape, slopes[a]), np.full(shape, offsets[a])

    return AffineIfsFamily(
        Alphabet(len(slopes)), builder, [[0.0, 0.0]], (lo * (1 - 1e-9), min(hi * (1 + 1e-9), (1 + hi) / 2)),
        domain=domain, name=name,
    )


def uniform_family(k: int, c: float) -> AffineIfsFamily:
    """``k`` maps of ratio ``c`` with evenly spread offsets."""
    offsets = np.linspace(-(1 - c), 1 - c, k) * (1 - 1e-12)
    return from_constant_maps(np.full(k, c), offsets, name=f"uniform(k={k},c={c})")


def rescaled(family: AffineIfsFamily, domain: tuple) -> AffineIfsFamily:
    """Conjugate a family by the increasing affine map from its interval onto ``domain``."""
    lo, hi = family.domain
    nlo, nhi = domain
    scale = (nhi - nlo) / (hi - lo)

    def builder(p, a):
        s, b = family.map_builder(p, a)
        # h(x) = scale x + shift, h psi h^-1 (y) = s y + scale b + (1 - s) shift
        shift = nlo - scale * lo
        return s, scale * b + shift - s * shift

    return AffineIfsFamily(
        family.alphabet, builder, family.parameter_box, family.gamma_bounds, family.margin, tuple(domain),
        name=family.name, meta=dict(family.meta),
    )


def build_section4_example(n: int, c: float, chart: str = "symmetric") -> AffineIfsFamily:
    """The overlapping example on ``n + 1`` letters with one parameter-dependent map.

    On the unit chart ``[0, 1]`` the maps are ``c x + (1/n - c)/2 + a/n`` for
    ``a < n`` and ``c x + p`` for ``a = n``, with ``p`` in ``[1/n, 1 - 1/n]``.
    The default chart is ``[-1, 1]``, reached by the conjugacy ``x -> 2x - 1``,
    which keeps every slope.
    """
    if int(n) != n or n < 2:
        raise InvariantViolation("the example needs an integer n >= 2")
    if not 0.0 < c < 1.0 / n:
        raise InvariantViolation(f"c = {c} must satisfy 0 < c < 1/n = {1.0 / n}")
    n = int(n)
    base = np.array([0.5 * (1.0 / n - c) + a / n for a in range(n)])

    def builder(p, a):
        p1 = np.asarray(p, dtype=float)[..., 0]
        if a < n:
            return np.full(p1.shape, c), np.full(p1.shape, base[a])
        return np.full(p1.shape, c), p1

    width = 1.0 - 2.0 / n
    # keep the parameter neighbourhood inside the range where c x + p maps [0, 1] into itself
    margin = min(0.05, 0.5 * (1.0 / n - c) / width) if width > 0 else 0.0
    unit = AffineIfsFamily(
        Alphabet(n + 1), builder, [[1.0 / n, 1.0 - 1.0 / n]], (c * (1 - 1e-9), c * (1 + 1e-9)),
        margin=margin, domain=(0.0, 1.0), name=f"section4(n={n},c={c})", meta={"n": n, "c": c},
    )
    if chart == "unit":
        return unit
    if chart != "symmetric":
        raise ContractError(f"unknown chart {chart!r}")
    out = rescaled(unit, (-1.0, 1.0))
    sym_offsets = [c + 2.0 * b - 1.0 for b in base]

    def formula(p_cols, addr, x_cols):
        # arithmetic form on the symmetric chart, usable with Taylor series
        from .skewprod import select

        offsets = sym_offsets + [p_cols[0] * 2.0 + (c - 1.0)]
        return [x_cols[0] * c + select(addr[:, 0], offsets)]

    out.meta["formula"] = formula
    return out
