import math

import numpy as np
import pytest

from blenderlab.affine_ifs import build_section4_example, from_constant_maps, uniform_family
from blenderlab.errors import ContractError, PrecisionError
from blenderlab.skewprod import nonlinear_test_system
from blenderlab.symbolic import FiniteWord
from blenderlab.thermo import gibbs_weights
from blenderlab.transversality import (
    PairSpec,
    Sampler,
    affine_scaling_residuals,
    auto_coding_depth,
    check_pair_strata,
    density_integral,
    local_box,
    random_pairs,
    scan_transversality,
    stratified_bound_check,
    stratum_mass_check,
    truncation_bound,
)

RADII = (1e-2, 1e-3, 1e-4)


@pytest.fixture(scope="module")
def section4():
    return build_section4_example(4, 0.21)


@pytest.fixture(scope="module")
def section4_scan(section4):
    return scan_transversality(section4, PairSpec(n_pairs=50, seed=0), RADII)


def test_auto_coding_depth(section4):
    n = auto_coding_depth(section4, 1e-4)
    assert 2 * truncation_bound(section4, n) <= 1e-5 < 2 * truncation_bound(section4, n - 1)


def test_random_pairs_differ_last():
    A, B = random_pairs(5, PairSpec(n_pairs=200, seed=3), 7)
    assert np.all(A[:, -1] != B[:, -1])


def test_equal_last_letters_rejected():
    with pytest.raises(ContractError):
        random_pairs(3, PairSpec(n_pairs=4, last_letters=(1, 1)), 5)


def test_estimates_monotone_and_bounded(section4_scan):
    est = section4_scan.measure_estimates
    # radii are stored largest first
    assert np.all(np.diff(est, axis=1) <= 0)
    assert np.all((est >= 0) & (est <= section4_scan.box_volume))


def test_section4_plausible(section4_scan):
    assert math.isfinite(section4_scan.C_hat)
    assert section4_scan.verdict == "plausible-(T)"


def test_section4_p_branch_pair_against_dense_grid(section4):
    # alpha ends in the p-dependent letter 4, beta in letter 0
    c = 0.21
    spec = PairSpec(n_pairs=6, seed=4, last_letters=(4, 0))
    scan = scan_transversality(section4, spec, (3e-1, 1e-1, 3e-2), Sampler(count=4000))
    A, B = random_pairs(5, spec, scan.coding_depth)
    grid = np.linspace(0.25, 0.75, 50_001)
    for i, (a, b) in enumerate(zip(A, B)):
        d = np.array([section4.compose([p], FiniteWord.backward(a))(0.0) - section4.compose([p], FiniteWord.backward(b))(0.0) for p in grid[::25]])
        for j, r in enumerate(scan.radii):
            ref = (np.abs(d) < r).mean() * 0.5
            assert scan.measure_estimates[i, j] == pytest.approx(ref, abs=2e-3)
            # the p-derivative of the difference is at least 2 (1 - c / (1 - c))
            assert scan.measure_estimates[i, j] <= 2 * r / (2 * (1 - c / (1 - c))) + 1e-3


def test_p_independent_overlap_is_infinite():
    # two identical maps: every pair collides at every parameter
    fam = from_constant_maps([0.5, 0.5], [0.2, 0.2])
    scan = scan_transversality(fam, PairSpec(n_pairs=10, seed=1), RADII)
    assert set(np.unique(scan.measure_estimates)) <= {0.0, scan.box_volume}
    assert scan.C_hat == math.inf and scan.verdict == "fails-(T)"


def test_coding_depth_too_small(section4):
    with pytest.raises(PrecisionError):
        scan_transversality(section4, PairSpec(n_pairs=5, coding_depth=3), RADII)


def test_fiber_system_scan():
    sys = nonlinear_test_system("sine")
    scan = scan_transversality(sys, PairSpec(n_pairs=10, seed=2), (1e-1, 1e-2), Sampler(count=500))
    assert scan.measure_estimates.shape == (10, 2)
    assert np.all(np.diff(scan.measure_estimates, axis=1) <= 0)


def test_scan_reproducible(section4):
    a = scan_transversality(section4, PairSpec(n_pairs=8, seed=5), (1e-2, 1e-3), Sampler(count=1000))
    b = scan_transversality(section4, PairSpec(n_pairs=8, seed=5), (1e-2, 1e-3), Sampler(count=1000))
    assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()


# stratified bound ------------------------------------------------------------------


def test_local_box(section4):
    np.testing.assert_allclose(local_box(section4, [0.5], 0.2), [[0.3, 0.7]])
    with pytest.raises(ContractError):
        local_box(section4, [0.3], 0.2)


def test_stratified_requires_dimension_above_one():
    fam = build_section4_example(4, 0.15)
    with pytest.raises(ContractError):
        stratified_bound_check(fam, [0.5], 0.2)


def test_stratified_bound_section4(section4):
    rep = stratified_bound_check(section4, [0.5], 0.2, n_max=6, seed=1)
    # the empty stratum is the plain check: Lambda_e = 1 and the bound is r^N
    empty = [r for r in rep.rows if r.n == 0]
    assert all(r.log_lambda == 0.0 and r.bound == pytest.approx(r.r) for r in empty)
    # Lambda_rho = c^|rho| on the uniform-slope example
    for r in rep.rows:
        assert r.log_lambda == pytest.approx(r.n * math.log(0.21), abs=1e-12)
    sups = np.array([rep.sup_by_depth[n] for n in range(7)])
    assert np.all(np.isfinite(sups)) and sups.max() <= 2.0


def test_affine_scaling_identity(section4):
    assert affine_scaling_residuals(section4, n_instances=1000, seed=3).max() <= 1e-12


def test_scaling_needs_affine():
    with pytest.raises(ContractError):
        affine_scaling_residuals(nonlinear_test_system("sine"))


# density integral ------------------------------------------------------------------


def test_radii_must_span_two_decades(section4):
    g = gibbs_weights(section4, [0.5], 2)
    with pytest.raises(ContractError):
        density_integral(section4, [0.5], 0.2, g, (1e-2, 1e-3), pair_samples=100)


def test_density_integral_precision_error(section4):
    g = gibbs_weights(section4, [0.5], 2)
    with pytest.raises(PrecisionError):
        density_integral(section4, [0.5], 0.2, g, (1e-5, 1e-6, 1e-7), pair_samples=20, p_per_pair=2)


def test_cantor_integral_is_singular():
    fam = uniform_family(2, 0.3)
    g = gibbs_weights(fam, [0.0], 4)
    rep = density_integral(fam, [0.0], 0.1, g, (1e-1, 1e-2, 1e-3), pair_samples=100_000)
    assert rep.singular and not rep.stable
    assert rep.growth_per_decade >= 2.0


def test_section4_integral_is_stable(section4):
    g = gibbs_weights(section4, [0.5], 4)
    rep = density_integral(section4, [0.5], 0.2, g, (1e-1, 1e-2, 1e-3), pair_samples=100_000)
    assert rep.stable and not rep.singular
    assert rep.stratum_check["passed"]
    assert rep.reliable.all()


def test_stratum_mass_oracle():
    g = gibbs_weights(build_section4_example(4, 0.21), [0.5], 3)
    rng = np.random.default_rng(0)
    A = rng.integers(0, 5, (20000, 8))
    B = rng.integers(0, 5, (20000, 8))
    assert stratum_mass_check(g, A, B)["passed"]
    assert check_pair_strata(A[:500], B[:500])
    # copies of one pair put all their mass on a stratum of length one
    C = np.tile(A[:1], (20000, 1))
    D = C.copy()
    D[:, -2] = (D[:, -2] + 1) % 5
    assert not stratum_mass_check(g, C, D)["passed"]
