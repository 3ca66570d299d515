"""Batched truncated multivariate Taylor arithmetic.

A :class:`TaylorSeries` holds normalized coefficients ``c_g`` of
``sum_g c_g h**g`` over multi-indices ``g`` with ``|g| <= s``, for a batch of
expansion points at once.  Coefficients live in the last axis of an array of
shape ``batch + (size,)``; multi-indices are in graded order.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def multi_indices(d: int, s: int) -> tuple[tuple[int, ...], ...]:
    """Exponent tuples with total degree at most ``s``.

    Sorted by total degree, then in descending lexicographic order, so for
    ``d=2`` the degree-one indices read ``(1, 0), (0, 1)``.
    """
    if d < 1 or s < 0:
        raise ValueError("need d >= 1 and s >= 0")
    out = []
    for deg in range(s + 1):
        level = [g for g in _compositions(deg, d)]
        level.sort(reverse=True)
        out.extend(level)
    return tuple(out)


def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


@lru_cache(maxsize=None)
def _tables(d: int, s: int):
    idx = multi_indices(d, s)
    pos = {g: i for i, g in enumerate(idx)}
    left, right, target = [], [], []
    for i, a in enumerate(idx):
        for j, b in enumerate(idx):
            g = tuple(x + y for x, y in zip(a, b))
            if sum(g) <= s:
                left.append(i)
                right.append(j)
                target.append(pos[g])
    scatter = np.zeros((len(target), len(idx)))
    scatter[np.arange(len(target)), target] = 1.0
    factorials = np.array([math.prod(math.factorial(k) for k in g) for g in idx], dtype=float)
    degree = np.array([sum(g) for g in idx])
    return pos, np.array(left), np.array(right), scatter, factorials, degree


class TaylorSeries:
    """Truncated Taylor series in ``d`` variables to total degree ``s``."""

    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, coeffs, d: int, s: int):
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.d = d
        self.s = s
        if self.coeffs.shape[-1] != len(multi_indices(d, s)):
            raise ValueError("coefficient axis does not match the index set")

    @property
    def size(self) -> int:
        return self.coeffs.shape[-1]

    @property
    def batch_shape(self):
        return self.coeffs.shape[:-1]

    @property
    def value(self) -> np.ndarray:
        return self.coeffs[..., 0]

    @classmethod
    def constant(cls, value, d, s):
        value = np.asarray(value, dtype=float)
        c = np.zeros(value.shape + (len(multi_indices(d, s)),))
        c[..., 0] = value
        return cls(c, d, s)

    @classmethod
    def variable(cls, value, k, d, s):
        """The series of ``value + h_k`` (``k`` is 0-based)."""
        out = cls.constant(value, d, s)
        if s >= 1:
            unit = tuple(1 if i == k else 0 for i in range(d))
            pos = _tables(d, s)[0]
            out.coeffs[..., pos[unit]] = 1.0
        return out

    @classmethod
    def from_derivatives(cls, derivs, d, s):
        """Build from raw partial derivatives in graded order."""
        fact = _tables(d, s)[4]
        return cls(np.asarray(derivs, dtype=float) / fact, d, s)

    def derivatives(self) -> np.ndarray:
        """Raw partial derivatives ``d^g f`` in graded order."""
        return self.coeffs * _tables(self.d, self.s)[4]

    def _lift(self, other):
        if isinstance(other, TaylorSeries):
            if (other.d, other.s) != (self.d, self.s):
                raise ValueError("incompatible Taylor series")
            return other
        return TaylorSeries.constant(other, self.d, self.s)

    def _zero_const(self):
        c = self.coeffs.copy()
        c[..., 0] = 0.0
        return TaylorSeries(c, self.d, self.s)

    def __neg__(self):
        return TaylorSeries(-self.coeffs, self.d, self.s)

    def __add__(self, other):
        if not isinstance(other, TaylorSeries):
            c = np.array(np.broadcast_to(self.coeffs, np.broadcast_shapes(self.batch_shape, np.shape(other)) + (self.size,)))
            c[..., 0] = c[..., 0] + other
            return TaylorSeries(c, self.d, self.s)
        other = self._lift(other)
        return TaylorSeries(self.coeffs + other.coeffs, self.d, self.s)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, TaylorSeries):
            return TaylorSeries(self.coeffs * np.asarray(other, dtype=float)[..., None], self.d, self.s)
        _, left, right, scatter, _, _ = _tables(self.d, self.s)
        prod = self.coeffs[..., left] * other.coeffs[..., right]
        return TaylorSeries(prod @ scatter, self.d, self.s)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, TaylorSeries):
            return self * (1.0 / np.asarray(other, dtype=float))
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, k):
        if int(k) != k:
            raise ValueError("only integer powers are supported")
        k = int(k)
        if k < 0:
            return self.reciprocal() ** (-k)
        result = TaylorSeries.constant(np.ones(self.batch_shape), self.d, self.s)
        base = self
        while k:
            if k & 1:
                result = result * base
            k >>= 1
            if k:
                base = base * base
        return result

    def compose_univariate(self, derivs) -> "TaylorSeries":
        """``f(self)`` given ``derivs[k] = f^(k)(value)`` for ``k = 0..s``."""
        u = self._zero_const()
        out = TaylorSeries.constant(derivs[0], self.d, self.s)
        power = None
        for k in range(1, self.s + 1):
            power = u if power is None else power * u
            out = out + power * (np.asarray(derivs[k]) / math.factorial(k))
        return out

    def reciprocal(self):
        v = self.value
        derivs = [(-1) ** k * math.factorial(k) / v ** (k + 1) for k in range(self.s + 1)]
        return self.compose_univariate(derivs)

    def sin(self):
        v = self.value
        cyc = [np.sin(v), np.cos(v), -np.sin(v), -np.cos(v)]
        return self.compose_univariate([cyc[k % 4] for k in range(self.s + 1)])

    def cos(self):
        v = self.value
        cyc = [np.cos(v), -np.sin(v), -np.cos(v), np.sin(v)]
        return self.compose_univariate([cyc[k % 4] for k in range(self.s + 1)])

    def exp(self):
        e = np.exp(self.value)
        return self.compose_univariate([e] * (self.s + 1))

    def __repr__(self):
        return f"TaylorSeries(d={self.d}, s={self.s}, batch={self.batch_shape})"


TAYLOR_FUNCS = {"sin": TaylorSeries.sin, "cos": TaylorSeries.cos, "exp": TaylorSeries.exp}


def _generic(name):
    def f(v):
        if isinstance(v, TaylorSeries):
            return getattr(v, name)()
        return getattr(np, name)(v)

    return f


MIXED_FUNCS = {name: _generic(name) for name in ("sin", "cos", "exp")}
