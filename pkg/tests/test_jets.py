import math

import mpmath
import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from blenderlab.affine_ifs import build_section4_example
from blenderlab.errors import CapabilityError, ContractError
from blenderlab.jets import (
    CallableFamily,
    ExprFamily,
    FormulaFamily,
    JetIndexSet,
    JetVector,
    PartialsFamily,
    fubini_verdict,
    induced_jet_system,
    induced_structure_report,
    jet_dimension,
    jet_set_sampler,
    jet_transport,
    transport_batch,
)
from blenderlab.measure_lab import pushforward
from blenderlab.skewprod import build_section3_blender, from_affine, nonlinear_test_system, verify_unipotent
from blenderlab.thermo import gibbs_weights, similarity_dimension


# dimension of jet space ------------------------------------------------------------


@pytest.mark.parametrize("d, s, expected", [(1, 0, 1), (1, 1, 2), (1, 5, 6), (2, 2, 6), (3, 2, 10)])
def test_jet_dimension_examples(d, s, expected):
    assert jet_dimension(d, s) == expected


@pytest.mark.parametrize("d", range(1, 7))
@pytest.mark.parametrize("s", range(1, 7))
def test_jet_dimension_pascal(d, s):
    lower = jet_dimension(d - 1, s) if d > 1 else 1
    assert jet_dimension(d, s) == lower + jet_dimension(d, s - 1)


@pytest.mark.parametrize("d, s", [(0, 1), (1, -1)])
def test_jet_dimension_rejects(d, s):
    with pytest.raises(ContractError):
        jet_dimension(d, s)


def test_index_set_order():
    iset = JetIndexSet(2, 2)
    assert iset.multi_indices == ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
    assert iset.size == 6 and iset.position((1, 1)) == 4


def test_jet_vector_validation():
    with pytest.raises(ContractError):
        JetVector(JetIndexSet(1, 2), [0.0, 1.0], (0.0,))
    with pytest.raises(ContractError):
        JetVector(JetIndexSet(1, 1), [0.0, 1.0], (0.0, 1.0))
    j = JetVector(JetIndexSet(1, 3), [1.0, 2.0, 6.0, 24.0], (0.5,))
    np.testing.assert_allclose(j.taylor_coefficients(), [1, 2, 3, 4])
    assert j.to_dict()["multi_indices"] == [[0], [1], [2], [3]]


# transport -------------------------------------------------------------------------


def test_order_zero_is_evaluation():
    fam = ExprFamily("sin(p) + 0.5*x", 1)
    out = jet_transport(fam, [0.3], JetVector(JetIndexSet(1, 0), [0.2], (0.3,)))
    assert out.coeffs.tolist() == pytest.approx([math.sin(0.3) + 0.1], abs=1e-15)


def test_affine_in_x_transport():
    # f_p(x) = c x + b(p) maps (x_0..x_s) to (c x_k + b^(k)(p0))
    c, p0 = 0.3, 0.7
    fam = ExprFamily("0.3*x + exp(2*p)", 1)
    x = np.array([0.1, -0.4, 1.3, 2.0])
    out = jet_transport(fam, [p0], JetVector(JetIndexSet(1, 3), x, (p0,)))
    b = [2.0**k * math.exp(2 * p0) for k in range(4)]
    np.testing.assert_allclose(out.coeffs, c * x + b, rtol=1e-14)


def test_basepoint_mismatch():
    fam = ExprFamily("0.5*x", 1)
    with pytest.raises(ContractError):
        jet_transport(fam, [0.1], JetVector(JetIndexSet(1, 1), [0.0, 0.0], (0.2,)))


def _sympy_jet(expr, psyms, xsym, curve, p0, s):
    """Raw partials of p -> expr(p, curve(p)) at p0."""
    comp = expr.subs(xsym, curve)
    out = []
    for g in JetIndexSet(len(psyms), s).multi_indices:
        e = comp
        for v, m in zip(psyms, g):
            if m:
                e = sp.diff(e, v, m)
        out.append(float(e.subs(dict(zip(psyms, p0)))))
    return np.array(out)


def _curve_jet(curve, psyms, p0, s):
    return _sympy_jet(sp.Symbol("x"), psyms, sp.Symbol("x"), curve, p0, s)


@pytest.mark.parametrize("d, s", [(1, 1), (1, 2), (1, 3), (2, 1), (2, 2)])
def test_polynomial_families_exact(d, s):
    g = np.random.default_rng(10 * d + s)
    P = sp.symbols(f"p1:{d + 1}")
    x = sp.Symbol("x")
    for _ in range(5):
        # degree <= s in each variable
        coef = g.uniform(-1, 1, (s + 1, s + 1))
        expr = sum(sp.Float(coef[i, j]) * P[i % d] ** j * x**i for i in range(s + 1) for j in range(s + 1))
        curve = sum(sp.Float(v) * P[0] ** k for k, v in enumerate(g.uniform(-1, 1, s + 1)))
        if d == 2:
            curve = curve + sp.Float(g.uniform(-1, 1)) * P[1]
        p0 = tuple(g.uniform(-0.5, 0.5, d))
        text = str(expr).replace("**", "^")
        fam = ExprFamily(text, d)
        jet = JetVector(JetIndexSet(d, s), _curve_jet(curve, P, p0, s), p0)
        ref = _sympy_jet(expr, P, x, curve, p0, s)
        np.testing.assert_allclose(jet_transport(fam, p0, jet).coeffs, ref, rtol=0, atol=1e-12 * max(1, np.abs(ref).max()))


def _mp_jet(fun, curve, p0, s):
    """Derivatives of p -> fun(p, curve(p)) at p0 to order s, with 40-digit arithmetic."""
    with mpmath.workdps(40):
        return np.array([float(mpmath.diff(lambda p: fun(p, curve(p)), mpmath.mpf(p0), k)) for k in range(s + 1)])


def _random_smooth(g):
    a, b, c, e, q = g.uniform(-1, 1, 5)

    def mp_f(p, x):
        return a * mpmath.sin(b * p + x) + c * x * mpmath.exp(e * p) + q * p * x**2 / 4

    def np_f(p, addr, x):
        p = p[..., 0]
        return a * np.sin(b * p + x) + c * x * np.exp(e * p) + q * p * x**2 / 4

    return mp_f, np_f


def test_finite_difference_oracle_matches_mpmath():
    # 100 random smooth families, orders up to 3
    g = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        s = int(trial % 4)
        mp_f, np_f = _random_smooth(g)
        u = g.uniform(-0.5, 0.5, 4)
        p0 = float(g.uniform(-0.5, 0.5))

        def curve(p, u=u):
            return u[0] + u[1] * mpmath.sin(p) + u[2] * p**2 + u[3] * mpmath.cos(2 * p)

        with mpmath.workdps(40):
            xj = np.array([float(mpmath.diff(curve, mpmath.mpf(p0), k)) for k in range(s + 1)])
        ref = _mp_jet(mp_f, curve, p0, s)
        out = jet_transport(CallableFamily(np_f, 1), [p0], JetVector(JetIndexSet(1, s), xj, (p0,))).coeffs
        scale = np.maximum(np.abs(ref), 1e-3)
        worst = max(worst, float(np.max(np.abs(out - ref) / scale)))
    assert worst <= 1e-5


def test_callable_family_capability():
    fam = CallableFamily(lambda p, a, x: x * 0.5, 1, max_order=2)
    with pytest.raises(CapabilityError):
        jet_transport(fam, [0.0], JetVector(JetIndexSet(1, 3), [0.0] * 4, (0.0,)))


def test_partials_family_matches_expression():
    # f = p x^2 given by its raw partials
    def partials(p0, addr, x0, order):
        p, x = p0[..., 0], x0
        table = {((0,), 0): p * x**2, ((1,), 0): x**2, ((0,), 1): 2 * p * x, ((1,), 1): 2 * x,
                 ((0,), 2): 2 * p, ((1,), 2): 2.0, ((2,), 0): 0.0, ((2,), 1): 0.0, ((0,), 3): 0.0}
        return {k: np.broadcast_to(v, np.shape(x)) for k, v in table.items() if sum(k[0]) + k[1] <= order}

    jet = JetVector(JetIndexSet(1, 2), [0.3, 1.1, -0.7], (0.4,))
    a = jet_transport(PartialsFamily(partials, 1), [0.4], jet).coeffs
    b = jet_transport(ExprFamily("p*x^2", 1), [0.4], jet).coeffs
    np.testing.assert_allclose(a, b, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-0.9, 0.9), min_size=6, max_size=6), st.integers(0, 3))
def test_composition_law(c, s):
    # jet of p -> g_p(f_p(x_p)) equals transport by g after transport by f
    f = ExprFamily(f"{c[0]}*sin(x + {c[1]}*p) + {c[2]}*p", 1)
    gf = ExprFamily(f"{c[3]}*x^2 + exp({c[4]}*p)*x + {c[5]}", 1)

    def both(ps, addr, xs):
        inner = f.formula(ps, addr, xs)[0]
        return gf.formula(ps, addr, [inner])

    composite = FormulaFamily(both, 1)
    jet = JetVector(JetIndexSet(1, s), np.linspace(0.2, -0.6, s + 1), (0.1,))
    direct = jet_transport(composite, [0.1], jet).coeffs
    chained = jet_transport(gf, [0.1], jet_transport(f, [0.1], jet)).coeffs
    np.testing.assert_allclose(direct, chained, rtol=1e-9, atol=1e-9)


def test_transport_batch_matches_single():
    fam = ExprFamily("0.4*cos(x) + p^2", 1)
    coeffs = np.array([[0.1, 0.2, 0.3], [-0.5, 0.0, 1.0]])
    out = transport_batch(fam, np.array([[0.2], [0.2]]), coeffs, d=1, s=2)
    for row, c in zip(out, coeffs):
        np.testing.assert_allclose(row, jet_transport(fam, [0.2], JetVector(JetIndexSet(1, 2), c, (0.2,))).coeffs, atol=1e-15)


# induced systems -------------------------------------------------------------------


def test_induced_affine_structure():
    base = from_affine(build_section4_example(4, 0.21))
    ind = induced_jet_system(base, 2)
    rep = induced_structure_report(ind)
    assert rep["max_upper"] <= 1e-9 and rep["diag_spread"] <= 1e-9 and rep["diag_vs_base"] <= 1e-9
    assert rep["eig_range"] == pytest.approx([0.21, 0.21], abs=1e-12)
    assert ind.fiber_dim == 3 and ind.meta["radii"][:2] == [1.0, 8.0]


def test_induced_section4_verify_unipotent():
    ind = induced_jet_system(from_affine(build_section4_example(4, 0.21)), 1)
    rep = verify_unipotent(ind)
    assert rep.passed and rep.eig_range == pytest.approx((0.21, 0.21), abs=1e-12)


def test_induced_dimension_matches_base():
    base = from_affine(build_section4_example(4, 0.21))
    ind = induced_jet_system(base, 2)
    a = similarity_dimension(base, [0.5])
    b = similarity_dimension(ind, [0.5])
    assert b == pytest.approx(a, abs=1e-9)


@pytest.mark.parametrize("kind", ["sine", "quadratic"])
@pytest.mark.parametrize("s", [1, 2])
def test_induced_nonlinear_structure(kind, s):
    ind = induced_jet_system(nonlinear_test_system(kind), s)
    rep = induced_structure_report(ind)
    assert rep["max_upper"] <= 1e-9 and rep["diag_spread"] <= 1e-9 and rep["diag_vs_base"] <= 1e-9


def test_induced_jacobian_matches_finite_differences():
    ind = induced_jet_system(nonlinear_test_system("sine"), 2)
    p, addr = np.array([[0.1]]), np.array([[1]])
    z = np.array([[0.2, 0.1, -0.05]])
    J = ind.fiber_jacobian(p, addr, z)[0]
    h = 1e-6
    for j in range(3):
        e = np.zeros((1, 3))
        e[0, j] = h
        col = (ind.fiber_map(p, addr, z + e) - ind.fiber_map(p, addr, z - e))[0] / (2 * h)
        np.testing.assert_allclose(J[:, j], col, atol=1e-8)


def test_induced_two_parameters():
    base = build_section3_blender(2, d=2).fiber
    ind = induced_jet_system(base, 1)
    assert ind.fiber_dim == 3
    rep = induced_structure_report(ind)
    assert rep["max_upper"] <= 1e-9 and rep["diag_spread"] <= 1e-9


def test_induced_rejects_planar_fiber():
    with pytest.raises(ContractError):
        induced_jet_system(nonlinear_test_system("planar"), 1)


def test_jet_sampler_order_zero_is_pushforward():
    base = nonlinear_test_system("sine")
    ind = induced_jet_system(base, 0)
    g = gibbs_weights(base, [0.2], 3)
    a = jet_set_sampler(ind, g, [0.2], 500, seed=5, coding_depth=20)
    b = pushforward(base, [0.2], (), g, 500, seed=5, coding_depth=20)
    assert a.atoms.shape[-1] == 1
    np.testing.assert_allclose(a.atoms, b.atoms, atol=1e-14)


def test_jet_sampler_reproducible():
    ind = induced_jet_system(nonlinear_test_system("quadratic"), 1)
    g = gibbs_weights(ind, [0.5], 2)
    a = jet_set_sampler(ind, g, [0.5], 200, seed=1)
    b = jet_set_sampler(ind, g, [0.5], 200, seed=1)
    np.testing.assert_array_equal(a.atoms, b.atoms)


def test_fubini_verdict():
    assert fubini_verdict(True, True) and not fubini_verdict(True, False)
