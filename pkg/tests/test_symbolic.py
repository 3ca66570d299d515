import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from blenderlab.errors import ContractError, InvariantViolation, ResourceCapError
from blenderlab.symbolic import (
    Alphabet,
    CylinderSpec,
    FiniteWord,
    SequenceMetricParams,
    enumerate_words,
    pair_stratum,
    sequence_distance,
    shift,
    word_array,
    word_index,
)


def test_alphabet_needs_two_letters():
    with pytest.raises(InvariantViolation):
        Alphabet(1)
    assert 2 in Alphabet(3) and 3 not in Alphabet(3)


def test_empty_word_allowed():
    e = FiniteWord.backward(())
    assert len(e) == 0
    assert CylinderSpec(e).contains(FiniteWord.backward((1, 0)))


def test_letters_checked_against_alphabet():
    with pytest.raises(InvariantViolation):
        FiniteWord.backward((0, 3)).check_alphabet(Alphabet(3))


@pytest.mark.parametrize(
    "word, k, expected",
    [
        (FiniteWord.forward((1, 2, 3)), 1, (2, 3)),
        (FiniteWord.backward((4, 5, 6)), 0, (4, 5, 6)),
        (FiniteWord.backward((4, 5, 6)), 3, ()),
        (FiniteWord.backward((4, 5, 6)), 1, (4, 5)),
    ],
)
def test_shift_examples(word, k, expected):
    assert shift(word, k).letters == expected


@pytest.mark.parametrize("k", [-1, 4])
def test_shift_out_of_range(k):
    with pytest.raises(IndexError):
        shift(FiniteWord.backward((1, 2, 3)), k)


def test_backward_indexing():
    w = FiniteWord.backward((7, 3, 5))
    assert (w.letter(-1), w.letter(-2), w.letter(-3)) == (5, 3, 7)
    assert w.prefix(2).letters == (3, 5)
    with pytest.raises(IndexError):
        w.letter(-4)


def test_periodic_tail():
    w = FiniteWord.backward((1, 2), tail="periodic")
    assert [w.letter(-i) for i in range(1, 6)] == [2, 1, 2, 1, 2]
    c = FiniteWord.forward((1, 2), tail="constant")
    assert c.letter(5) == 2


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((1, 2, 3), (1, 2, 3), 0.0),
        ((1, 2), (1, 3), 0.5),
        ((2, 2), (1, 2), 1.0),
    ],
)
def test_sequence_distance_examples(a, b, expected):
    assert sequence_distance(FiniteWord.forward(a), FiniteWord.forward(b), SequenceMetricParams(0.5)) == expected


def test_sequence_distance_orientation_mismatch():
    with pytest.raises(ContractError):
        sequence_distance(FiniteWord.forward((1,)), FiniteWord.backward((1,)))


def test_sequence_distance_backward_counts_from_origin():
    a, b = FiniteWord.backward((0, 1, 2)), FiniteWord.backward((1, 1, 2))
    assert sequence_distance(a, b) == 0.25


def test_metric_base_range():
    with pytest.raises(InvariantViolation):
        SequenceMetricParams(1.0)


@pytest.mark.parametrize(
    "a, b, rho, split",
    [
        ((7, 3, 5), (2, 3, 5), (3, 5), True),
        ((1, 1, 1), (1, 1, 1), (1, 1, 1), False),
        ((2, 9), (4, 9), (9,), True),
    ],
)
def test_pair_stratum_examples(a, b, rho, split):
    r, s = pair_stratum(FiniteWord.backward(a), FiniteWord.backward(b))
    assert r.letters == rho and s is split


@pytest.mark.parametrize("k", [2, 3])
@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_strata_partition_pairs(k, n):
    # every pair with a disagreement lies in exactly one stratum C_rho
    words = word_array(k, n)
    counts = {}
    for a, b in itertools.product(range(len(words)), repeat=2):
        if a == b:
            continue
        rho, split = pair_stratum(FiniteWord.backward(words[a]), FiniteWord.backward(words[b]))
        assert split
        m = len(rho)
        assert np.array_equal(words[a][n - m :], words[b][n - m :])
        assert words[a][n - m - 1] != words[b][n - m - 1]
        counts[rho.letters] = counts.get(rho.letters, 0) + 1
    # size of C_rho: k^(n-m-1)^2 * k (k - 1) pairs for each rho of length m
    for rho, c in counts.items():
        m = len(rho)
        assert c == k ** (2 * (n - m - 1)) * k * (k - 1)
    assert sum(counts.values()) == k**n * (k**n - 1)


def test_enumerate_examples():
    assert [w.letters for w in enumerate_words(Alphabet(2), 1)] == [(0,), (1,)]
    assert [w.letters for w in enumerate_words(Alphabet(3), 0)] == [()]
    ws = list(enumerate_words(Alphabet(2), 3))
    assert len(ws) == 8 and ws[0].letters == (0, 0, 0) and ws[-1].letters == (1, 1, 1)


def test_enumeration_cap():
    with pytest.raises(ResourceCapError):
        list(enumerate_words(Alphabet(2), 10, cap=100))
    with pytest.raises(ResourceCapError):
        word_array(3, 5, cap=10)


@given(st.integers(2, 4), st.integers(0, 5))
def test_word_array_matches_enumeration(k, n):
    arr = word_array(k, n)
    ref = [w.letters for w in enumerate_words(Alphabet(k), n)]
    assert [tuple(int(x) for x in row) for row in arr] == ref
    for i, row in enumerate(arr):
        assert word_index(row, k) == i


@given(st.lists(st.integers(0, 3), min_size=1, max_size=8), st.lists(st.integers(0, 3), max_size=8))
def test_shift_inverts_concat(head, tail):
    # shifting a backward word drops the letters nearest the origin
    w = FiniteWord.backward(tail).concat(FiniteWord.backward(head))
    assert shift(w, len(head)).letters == tuple(tail)
