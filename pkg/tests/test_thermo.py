import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blenderlab.affine_ifs import build_section4_example, from_constant_maps, uniform_family
from blenderlab.errors import ResourceCapError
from blenderlab.skewprod import build_section3_blender, nonlinear_test_system
from blenderlab.symbolic import FiniteWord
from blenderlab.thermo import (
    gibbs_weights,
    log_lambda_words,
    partition_sum,
    pressure_curve,
    quasi_multiplicativity,
    sample_word,
    sample_words,
    similarity_dimension,
)


def test_partition_sum_closed_form():
    assert partition_sum(uniform_family(3, 0.5), [0.0], 1.0, 2) == pytest.approx(2.25, rel=1e-15)


@pytest.mark.parametrize("system", [uniform_family(3, 0.5), build_section4_example(4, 0.21)])
def test_partition_sum_at_zero(system):
    assert partition_sum(system, system.parameter_box.mean(axis=1), 0.0, 3) == pytest.approx(system.k**3, rel=1e-14)


def test_partition_sum_at_dimension():
    fam = build_section4_example(4, 0.21)
    delta = math.log(5) / -math.log(0.21)
    assert partition_sum(fam, [0.5], delta, 1) == pytest.approx(1.0, abs=1e-14)


def test_enumeration_cap():
    with pytest.raises(ResourceCapError):
        log_lambda_words(uniform_family(5, 0.1), [0.0], 12, cap=10**6)


def test_pressure_uniform_line():
    cur = pressure_curve(uniform_family(3, 0.5), [0.0], [0.0, 1.0], depths=(1, 2, 5))
    np.testing.assert_allclose(cur.values[:, 1], math.log(1.5), atol=1e-14)
    np.testing.assert_allclose(cur.values[:, 0], math.log(3), atol=1e-14)


@pytest.mark.parametrize("kind", ["sine", "quadratic", "planar"])
def test_pressure_properties_nonlinear(kind):
    sys = nonlinear_test_system(kind)
    p = sys.parameter_box.mean(axis=1)
    s = np.linspace(0, 2, 9)
    cur = pressure_curve(sys, p, s, depths=(2, 4, 6))
    # log k at s = 0, strictly decreasing, and the slope bound by log gamma_hi
    np.testing.assert_allclose(cur.values[:, 0], math.log(sys.k), atol=1e-13)
    assert np.all(np.diff(cur.values, axis=1) < 0)
    step = s[1] - s[0]
    assert np.all(np.diff(cur.values, axis=1) <= step * math.log(sys.gamma_hi) + 1e-12)


def test_fekete_spread_shrinks():
    sys = nonlinear_test_system("sine")
    a = pressure_curve(sys, [0.2], [1.0], depths=(2, 4)).spread[0]
    b = pressure_curve(sys, [0.2], [1.0], depths=(4, 8)).spread[0]
    assert b <= a


@pytest.mark.parametrize(
    "system, expected",
    [
        (uniform_family(2, 0.5), 1.0),
        (build_section4_example(4, 0.21), math.log(5) / -math.log(0.21)),
        (build_section3_blender(2).fiber, math.log(3) / math.log(2)),
    ],
)
def test_similarity_dimension_closed_forms(system, expected):
    p = system.parameter_box.mean(axis=1)
    assert similarity_dimension(system, p) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.05, 0.6), min_size=2, max_size=4))
def test_moran_equation(slopes):
    # sum c_a^D = 1 for parameter-free affine maps
    k = len(slopes)
    offsets = np.linspace(-0.3, 0.3, k)
    fam = from_constant_maps(slopes, offsets)
    D = similarity_dimension(fam, [0.0], tol=1e-12)
    assert sum(c**D for c in slopes) == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("depth", [1, 3, 5])
def test_gibbs_uniform(depth):
    g = gibbs_weights(uniform_family(3, 0.4), [0.0], depth)
    np.testing.assert_allclose(g.weights, 3.0**-depth, rtol=1e-12)
    assert math.fsum(g.weights) == pytest.approx(1.0, abs=1e-12)


def test_gibbs_section4_uniform():
    g = gibbs_weights(build_section4_example(4, 0.21), [0.5], 3)
    np.testing.assert_allclose(g.weights, 5.0**-3, rtol=1e-12)


@pytest.mark.parametrize("kind", ["sine", "quadratic", "planar"])
def test_gibbs_normalized_nonlinear(kind):
    sys = nonlinear_test_system(kind)
    g = gibbs_weights(sys, sys.parameter_box.mean(axis=1), 5)
    assert abs(math.fsum(g.weights) - 1.0) <= 1e-12
    assert np.all(g.weights > 0)


def test_gibbs_weight_lookup():
    fam = from_constant_maps([0.5, 0.25], [-0.4, 0.5])
    g = gibbs_weights(fam, [0.0], 2)
    D = g.exponent
    w = [(0.5**D) ** (2 - i) * (0.25**D) ** i for i in range(3)]
    Z = w[0] + 2 * w[1] + w[2]
    assert g.weight(FiniteWord.backward((0, 1))) == pytest.approx(w[1] / Z, rel=1e-12)


def test_quasi_multiplicativity_affine_is_one():
    assert quasi_multiplicativity(build_section4_example(4, 0.21), [0.5], 4) == pytest.approx(1.0, abs=1e-12)


def test_quasi_multiplicativity_stable():
    sys = nonlinear_test_system("sine")
    c4 = quasi_multiplicativity(sys, [0.25], 4)
    c8 = quasi_multiplicativity(sys, [0.25], 8)
    assert c4 >= 1.0 and abs(c8 / c4 - 1) <= 0.25


def test_sampling_reproducible():
    g = gibbs_weights(uniform_family(3, 0.4), [0.0], 4)
    assert sample_word(g, 7) == sample_word(g, 7)
    assert np.array_equal(sample_words(g, 100, 3), sample_words(g, 100, 3))
    assert not np.array_equal(sample_words(g, 100, 3), sample_words(g, 100, 4))


def test_sampling_frequencies():
    sys = nonlinear_test_system("quadratic")
    g = gibbs_weights(sys, [0.5], 2)
    n = 10**6
    w = sample_words(g, n, 11)
    idx = w[:, 0] * 3 + w[:, 1]
    freq = np.bincount(idx, minlength=9) / n
    sigma = np.sqrt(g.weights * (1 - g.weights) / n)
    assert np.all(np.abs(freq - g.weights) <= 4 * sigma)


def test_gibbs_serialization():
    g = gibbs_weights(uniform_family(2, 0.3), [0.0], 2)
    assert g.to_csv().splitlines()[0] == "word,weight"
    assert '"depth": 2' in g.to_json()
