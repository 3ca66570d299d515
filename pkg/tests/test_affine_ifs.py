import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blenderlab.affine_ifs import (
    AffineContraction,
    build_section4_example,
    from_constant_maps,
    rescaled,
    uniform_family,
)
from blenderlab.errors import ContractError, DomainError, InvariantViolation
from blenderlab.symbolic import FiniteWord, word_array


def test_contraction_invariants():
    with pytest.raises(InvariantViolation):
        AffineContraction(1.2, 0.0)
    with pytest.raises(InvariantViolation):
        AffineContraction(0.5, 0.6)  # |s| + |b| >= 1
    f = AffineContraction(-0.5, 0.25)
    assert f(1.0) == -0.25
    assert f.fixed_point() == pytest.approx(0.25 / 1.5)


def test_empty_word_is_identity():
    fam = uniform_family(3, 0.3)
    g = fam.compose([0.0], FiniteWord.backward(()))
    assert (g.slope, g.offset) == (1.0, 0.0)


def test_composite_slope_multiplies():
    fam = from_constant_maps([0.5, 0.3], [0.2, -0.4])
    g = fam.compose([0.0], FiniteWord.backward((0, 1)))
    assert abs(g.slope) == pytest.approx(0.15, abs=1e-16)


def test_section4_composite_slope():
    fam = build_section4_example(4, 0.21)
    for w in word_array(5, 3)[::17]:
        g = fam.compose([0.4], FiniteWord.backward(w))
        assert abs(g.slope) == pytest.approx(0.009261, rel=1e-12)


def test_composition_order():
    # the letter at index -1 acts last
    fam = from_constant_maps([0.5, 0.5], [0.25, -0.25])
    g = fam.compose([0.0], FiniteWord.backward((0, 1)))
    assert g(0.0) == pytest.approx(0.5 * 0.25 - 0.25)


def test_constant_word_fixed_point():
    fam = from_constant_maps([0.5, 0.3], [0.25, 0.0])
    w = FiniteWord.backward((0,), tail="constant")
    pt = fam.code_point([0.0], w, depth=50)
    assert pt.value == pytest.approx(0.5, abs=1e-10)
    assert pt.error_bound <= 2 * fam.gamma_hi**50
    zero = fam.code_point([0.0], FiniteWord.backward((1,), tail="constant"), depth=17)
    assert zero.value == 0.0


def test_section4_coding_self_consistency():
    fam = build_section4_example(4, 0.21)
    w = FiniteWord.backward((0, 1), tail="periodic")
    a = fam.code_point([0.4], w, depth=40)
    b = fam.code_point([0.4], w, depth=80)
    assert abs(a.value - b.value) <= 2 * 0.21**40


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.95, 0.95).filter(lambda c: abs(c) > 0.01), st.floats(-1, 1))
def test_constant_words_code_fixed_points(c, u):
    b = u * (1 - abs(c)) * 0.99
    fam = from_constant_maps([c, 0.5], [b, 0.0])
    pt = fam.code_point([0.0], FiniteWord.backward((0,), tail="constant"), depth=2000)
    assert pt.value == pytest.approx(b / (1 - c), abs=1e-10)


def test_section4_builder_values():
    fam = build_section4_example(4, 0.21)
    s, _ = fam.coefficients([0.5])
    np.testing.assert_array_equal(s.reshape(-1), [0.21] * 5)
    unit = build_section4_example(2, 0.4, chart="unit")
    f0 = unit.contraction([0.5], 0)
    f2 = unit.contraction([0.5], 2)
    assert (f0.slope, f0.offset) == pytest.approx((0.4, 0.05))
    assert (f2.slope, f2.offset) == pytest.approx((0.4, 0.5))


@pytest.mark.parametrize("n, c", [(4, 0.25), (2, 0.5), (3, 0.0), (1, 0.2)])
def test_section4_rejects_bad_constants(n, c):
    with pytest.raises(InvariantViolation):
        build_section4_example(n, c)


def test_parameter_outside_box():
    fam = build_section4_example(4, 0.21)
    with pytest.raises(DomainError):
        fam.code_batch([0.9], [[0, 1]])


def test_rescaling_is_a_conjugacy():
    unit = build_section4_example(4, 0.21, chart="unit")
    sym = rescaled(unit, (-1.0, 1.0))
    words = word_array(5, 4)
    # h(x) = 2x - 1 maps unit-chart orbits of h^{-1}(0) = 1/2 to symmetric-chart orbits of 0
    a = sym.code_batch([0.3], words)
    g = np.full(len(words), 0.5)
    s, b = unit.coefficients([0.3])
    for j in range(words.shape[1]):
        g = s.reshape(-1)[words[:, j]] * g + b.reshape(-1)[words[:, j]]
    np.testing.assert_allclose(a, 2 * g - 1, atol=1e-15)


def test_code_batch_matches_compose():
    fam = build_section4_example(4, 0.21)
    words = word_array(5, 3)
    batch = fam.code_batch([0.6], words)
    single = [fam.compose([0.6], FiniteWord.backward(w))(0.0) for w in words]
    np.testing.assert_allclose(batch, single, atol=1e-15)


def test_code_batch_per_row_parameters():
    fam = build_section4_example(4, 0.21)
    P = np.array([[0.3], [0.5], [0.7]])
    words = np.array([[4, 4], [4, 4], [4, 4]])
    out = fam.code_batch(P, words)
    for p, v in zip(P[:, 0], out):
        assert v == pytest.approx(fam.compose([p], FiniteWord.backward((4, 4)))(0.0))


def test_compose_rejects_forward_words():
    with pytest.raises(ContractError):
        uniform_family(2, 0.3).compose([0.0], FiniteWord.forward((0,)))


def test_continuity_report():
    rep = build_section4_example(4, 0.21).continuity_report()
    assert rep["continuous"]
    assert rep["lipschitz_estimate"] == pytest.approx(2.0, rel=1e-6)


def test_log_slopes():
    fam = uniform_family(3, 0.3)
    np.testing.assert_allclose(fam.log_slopes([0.0]).reshape(-1), [math.log(0.3)] * 3)
