"""Finite words over a finite alphabet, shifts, cylinders and the sequence metric.

Letters are the integers ``0 .. size-1``.  A backward word stores its letters
in reading order ``(a_{-n}, ..., a_{-1})``: the last stored letter is the one
adjacent to the origin.  A forward word stores ``(a_0, ..., a_{n-1})``.

Infinite sequences are represented by a finite word together with a tail
convention (``"constant"`` repeats the letter farthest from the origin,
``"periodic"`` repeats the whole block).  ``tail="none"`` marks a plain
finite word.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Literal, Sequence

import numpy as np

from .errors import ContractError, InvariantViolation, ResourceCapError

Orientation = Literal["forward", "backward"]
Tail = Literal["none", "constant", "periodic"]

DEFAULT_ENUMERATION_CAP = 10**8


@dataclass(frozen=True)
class Alphabet:
    size: int

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 2:
            raise InvariantViolation(f"alphabet needs at least 2 letters, got {self.size}")

    def __contains__(self, letter):
        return 0 <= letter < self.size

    def __len__(self):
        return self.size


@dataclass(frozen=True)
class FiniteWord:
    letters: tuple[int, ...] = ()
    orientation: Orientation = "backward"
    tail: Tail = "none"

    def __post_init__(self):
        object.__setattr__(self, "letters", tuple(int(a) for a in self.letters))
        if self.orientation not in ("forward", "backward"):
            raise ContractError(f"unknown orientation {self.orientation!r}")
        if self.tail not in ("none", "constant", "periodic"):
            raise ContractError(f"unknown tail convention {self.tail!r}")
        if self.tail != "none" and not self.letters:
            raise ContractError("an infinite tail needs at least one letter")
        if any(a < 0 for a in self.letters):
            raise InvariantViolation("letters are nonnegative integers")

    @classmethod
    def backward(cls, letters: Sequence[int], tail: Tail = "none") -> "FiniteWord":
        return cls(tuple(letters), "backward", tail)

    @classmethod
    def forward(cls, letters: Sequence[int], tail: Tail = "none") -> "FiniteWord":
        return cls(tuple(letters), "forward", tail)

    def __len__(self):
        return len(self.letters)

    @property
    def is_infinite(self) -> bool:
        return self.tail != "none"

    def check_alphabet(self, alphabet: Alphabet) -> "FiniteWord":
        bad = [a for a in self.letters if a >= alphabet.size]
        if bad:
            raise InvariantViolation(f"letters {bad} outside alphabet of size {alphabet.size}")
        return self

    def letter(self, i: int) -> int:
        """Letter at sequence index ``i`` (``i >= 0`` forward, ``i <= -1`` backward)."""
        if self.orientation == "forward":
            if i < 0:
                raise IndexError(i)
            pos = i
        else:
            if i >= 0:
                raise IndexError(i)
            pos = -i - 1  # distance from the origin
        n = len(self.letters)
        if pos < n:
            return self.letters[pos] if self.orientation == "forward" else self.letters[n - 1 - pos]
        if self.tail == "none":
            raise IndexError(f"index {i} beyond finite word of length {n}")
        if self.tail == "constant":
            return self.letters[-1] if self.orientation == "forward" else self.letters[0]
        pos %= n
        return self.letters[pos] if self.orientation == "forward" else self.letters[n - 1 - pos]

    def prefix(self, n: int) -> "FiniteWord":
        """The ``n`` letters adjacent to the origin, as a plain finite word."""
        if n < 0:
            raise ContractError("prefix length must be nonnegative")
        if n > len(self.letters) and self.tail == "none":
            raise ContractError(f"word of length {len(self.letters)} has no prefix of length {n}")
        if self.orientation == "forward":
            letters = tuple(self.letter(i) for i in range(n))
        else:
            letters = tuple(self.letter(-i) for i in range(n, 0, -1))
        return FiniteWord(letters, self.orientation, "none")

    def concat(self, other: "FiniteWord") -> "FiniteWord":
        """Concatenation in reading order, as in ``alpha beta`` or ``beta a``."""
        if self.orientation != other.orientation:
            raise ContractError("cannot concatenate words of different orientation")
        if self.orientation == "backward":
            tail = self.tail
        else:
            tail = other.tail
        return FiniteWord(self.letters + other.letters, self.orientation, tail)


def shift(word: FiniteWord, k: int) -> FiniteWord:
    """Apply the shift ``k`` times to a finite representative.

    Forward words lose their first ``k`` letters, backward words the ``k``
    letters closest to index -1.
    """
    n = len(word)
    if not 0 <= k <= n:
        raise IndexError(f"shift by {k} out of range for word of length {n}")
    if word.orientation == "forward":
        letters = word.letters[k:]
    else:
        letters = word.letters[: n - k]
    tail = word.tail if letters else "none"
    return FiniteWord(letters, word.orientation, tail)


@dataclass(frozen=True)
class SequenceMetricParams:
    base: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.base < 1.0:
            raise InvariantViolation(f"metric base must lie in (0, 1), got {self.base}")


@dataclass(frozen=True)
class CylinderSpec:
    word: FiniteWord
    space: Literal["forward", "backward", "bilateral"] = "backward"

    def contains(self, seq: FiniteWord) -> bool:
        if self.space == "forward" and seq.orientation != "forward":
            raise ContractError("forward cylinder tested against a backward sequence")
        if self.space != "forward" and seq.orientation != "backward":
            raise ContractError("backward cylinder tested against a forward sequence")
        n = len(self.word)
        try:
            return seq.prefix(n).letters == self.word.letters
        except ContractError:
            return False


def sequence_distance(
    a: FiniteWord,
    b: FiniteWord,
    params: SequenceMetricParams = SequenceMetricParams(),
    mode: Literal["common", "periodic"] = "common",
) -> float:
    """``base**q`` where ``q`` is the length of agreement measured from the origin.

    ``mode="common"`` compares only indices defined in both words;
    ``mode="periodic"`` extends both words periodically and compares over the
    least common multiple of their lengths.  Returns 0 when no compared index
    disagrees.
    """
    if a.orientation != b.orientation:
        raise ContractError("sequence_distance needs words of the same orientation")
    if mode == "common":
        m = min(len(a), len(b))
        pa, pb = a.prefix(m).letters, b.prefix(m).letters
    elif mode == "periodic":
        if not len(a) or not len(b):
            raise ContractError("periodic comparison needs nonempty words")
        m = math.lcm(len(a), len(b))
        pa = FiniteWord(a.letters, a.orientation, "periodic").prefix(m).letters
        pb = FiniteWord(b.letters, b.orientation, "periodic").prefix(m).letters
    else:
        raise ContractError(f"unknown comparison mode {mode!r}")
    if a.orientation == "backward":
        pa, pb = pa[::-1], pb[::-1]
    for q, (x, y) in enumerate(zip(pa, pb)):
        if x != y:
            return params.base**q
    return 0.0


def pair_stratum(alpha: FiniteWord, beta: FiniteWord) -> tuple[FiniteWord, bool]:
    """Longest common suffix of two backward words and whether they split after it.

    ``split`` is True when the letters just beyond the common part differ, i.e.
    the pair lies in the stratum of pairs agreeing exactly on ``rho``.
    """
    if alpha.orientation != "backward" or beta.orientation != "backward":
        raise ContractError("pair_stratum works on backward words")
    n = len(alpha)
    if n != len(beta) or n < 1:
        raise ContractError("pair_stratum needs backward words of equal positive length")
    m = 0
    while m < n and alpha.letters[n - 1 - m] == beta.letters[n - 1 - m]:
        m += 1
    rho = FiniteWord(alpha.letters[n - m :], "backward")
    return rho, m < n


def _check_cap(count: int, cap: int):
    if count > cap:
        raise ResourceCapError(f"{count} words requested, enumeration cap is {cap}")


def enumerate_words(
    alphabet: Alphabet,
    n: int,
    orientation: Orientation = "backward",
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> Iterator[FiniteWord]:
    """Yield all ``size**n`` words of length ``n`` in lexicographic order."""
    if n < 0:
        raise ContractError("word length must be nonnegative")
    _check_cap(alphabet.size**n, cap)
    for letters in itertools.product(range(alphabet.size), repeat=n):
        yield FiniteWord(letters, orientation)


def word_array(k: int, n: int, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """All words of length ``n`` over ``k`` letters as a ``(k**n, n)`` array, lexicographic."""
    _check_cap(k**n, cap)
    if n == 0:
        return np.zeros((1, 0), dtype=np.int64)
    idx = np.arange(k**n, dtype=np.int64)
    powers = k ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return (idx[:, None] // powers[None, :]) % k


def word_index(letters: Sequence[int], k: int) -> int:
    """Position of a word in the lexicographic enumeration of its length."""
    idx = 0
    for a in letters:
        idx = idx * k + int(a)
    return idx
