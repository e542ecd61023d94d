import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from benchkelly.model import ModelSpec, validate_model
from benchkelly.policy import (
    batch_allocation,
    batch_gamma,
    batch_kelly,
    batch_nu,
    fractional_kelly,
    optimal_gamma,
    optimal_h,
    optimal_nu,
)
from benchkelly.valuefn import solve_value_coefficients, value_function

from conftest import make_random_spec, make_scalar_spec


@pytest.fixture(scope="module")
def solved_random():
    """Three random solved models for identity sweeps."""
    out = []
    for seed in (21, 22, 23):
        rng = np.random.default_rng(seed)
        vm = validate_model(make_random_spec(rng))
        out.append((vm, solve_value_coefficients(vm, steps_per_year=252), rng))
    return out


def test_hand_value_no_hedge():
    # a = 0.04, A = 0, Lambda = 0, Xi = 0, theta = 1: h* = 0.5 * a / ss = 0.5
    spec = ModelSpec.constant(
        n=1, m=1, d=1, horizon_years=1.0, theta=1.0, x0=[0.0],
        asset_drift=[0.04], asset_vol=[[0.2]],
    )
    vm = validate_model(spec)
    vc = solve_value_coefficients(vm, steps_per_year=252)
    h = optimal_h(vm, vc, 0.3, np.zeros(1))
    assert h[0] == pytest.approx(0.5, abs=1e-12)


def test_zero_numerator_gives_zero_allocation():
    # pick x with a + A x = 0 in a hedge-free model: h* = 0
    spec = ModelSpec.constant(
        n=1, m=1, d=1, horizon_years=1.0, theta=1.0, x0=[0.0],
        asset_drift=[0.04], asset_factor_loading=[[0.2]], asset_vol=[[0.2]],
    )
    vm = validate_model(spec)
    vc = solve_value_coefficients(vm, steps_per_year=252)
    x = np.array([-0.2])  # a + A x = 0.04 - 0.04
    h = optimal_h(vm, vc, 0.0, x)
    # Lambda = 0 kills the gradient correction entirely
    assert abs(h[0]) < 1e-14


def test_theta_zero_is_exact_kelly(scalar_model):
    spec = make_scalar_spec(theta=0.0)
    vm = validate_model(spec)
    vc = solve_value_coefficients(vm, steps_per_year=252)
    x = np.array([0.4])
    block = vm.coefficients(0.2)
    gram = vm.gram_blocks(0.2)
    expected = gram.ss_solve(block.asset_drift + block.asset_factor_loading @ x)
    assert np.array_equal(optimal_h(vm, vc, 0.2, x), expected)


def test_kelly_limit_small_theta():
    spec = make_scalar_spec(theta=1e-8, bench_vol=[0.0])
    vm = validate_model(spec)
    vc = solve_value_coefficients(vm, steps_per_year=504)
    rng = np.random.default_rng(2)
    for _ in range(20):
        t = float(rng.uniform(0, 1))
        x = rng.standard_normal(1)
        h = optimal_h(vm, vc, t, x)
        kelly = fractional_kelly(vm, vc, t, x).kelly
        assert np.abs(h - kelly).max() < 1e-6


def test_route_equivalence_random_points(solved_random):
    for vm, vc, rng in solved_random:
        for _ in range(100):
            t = float(rng.uniform(0, vm.horizon))
            x = rng.standard_normal(vm.n)
            h1 = optimal_h(vm, vc, t, x, route="direct")
            h2 = optimal_h(vm, vc, t, x, route="twostep")
            assert np.abs(h1 - h2).max() <= 1e-12 * (1.0 + np.abs(h1).max())


def test_gamma_theta_zero_reduces_to_gradient_term():
    spec = make_scalar_spec(theta=0.0)
    vm = validate_model(spec)
    vc = solve_value_coefficients(vm, steps_per_year=252)
    x = np.array([0.3])
    gamma = optimal_gamma(vm, vc, 0.5, x)
    lam = vm.coefficients(0.5).factor_vol
    grad = value_function(vc, 0.5, x).gradient
    assert np.array_equal(gamma, lam.T @ grad)
    assert np.all(gamma == 0.0)  # gradient of the log criterion vanishes at theta = 0


def test_gamma_zero_gradient_form():
    # Du = 0 and Xi = 0: gamma* = -(theta/(theta+1)) Sigma'(SS)^-1 (a + A x)
    spec = ModelSpec.constant(
        n=1, m=1, d=2, horizon_years=1.0, theta=1.0, x0=[0.0],
        asset_drift=[0.04], asset_vol=[[0.2, 0.0]],
    )
    vm = validate_model(spec)
    vc = solve_value_coefficients(vm, steps_per_year=252)
    x = np.array([0.7])
    gamma = optimal_gamma(vm, vc, 0.2, x)
    block = vm.coefficients(0.2)
    gram = vm.gram_blocks(0.2)
    expected = -0.5 * (block.asset_vol.T @ gram.ss_solve(block.asset_drift))
    assert np.abs(gamma - expected).max() < 1e-14


def test_gamma_dual_forms_agree(solved_random):
    # optimal_gamma cross-asserts its two representations internally
    for vm, vc, rng in solved_random:
        for _ in range(50):
            t = float(rng.uniform(0, vm.horizon))
            x = rng.standard_normal(vm.n)
            optimal_gamma(vm, vc, t, x)  # raises RepresentationMismatch on failure


def test_nu_equals_factor_loading_of_gradient(solved_random):
    for vm, vc, rng in solved_random:
        t = float(rng.uniform(0, vm.horizon))
        x = rng.standard_normal(vm.n)
        nu = optimal_nu(vm, vc, t, x)
        lam = vm.coefficients(t).factor_vol
        grad = value_function(vc, t, x).gradient
        assert np.abs(nu - lam.T @ grad).max() < 1e-12 * (1.0 + np.abs(nu).max())


def test_nu_zero_without_factor_noise():
    spec = ModelSpec.constant(
        n=1, m=1, d=1, horizon_years=1.0, theta=1.0, x0=[0.0],
        asset_drift=[0.04], asset_factor_loading=[[1.0]], asset_vol=[[0.2]],
    )
    vm = validate_model(spec)
    vc = solve_value_coefficients(vm, steps_per_year=252)
    assert np.all(optimal_nu(vm, vc, 0.5, np.array([1.0])) == 0.0)


def test_tilt_relation(solved_random):
    for vm, vc, rng in solved_random:
        for _ in range(50):
            t = float(rng.uniform(0, vm.horizon))
            x = rng.standard_normal(vm.n)
            block = vm.coefficients(t)
            h = optimal_h(vm, vc, t, x)
            gamma = optimal_gamma(vm, vc, t, x)
            nu = optimal_nu(vm, vc, t, x)
            resid = gamma - nu + vm.theta * (block.asset_vol.T @ h - block.bench_vol)
            assert np.abs(resid).max() <= 1e-12 * (1.0 + np.abs(gamma).max())


def test_fractional_kelly_fields(scalar_model, scalar_vc):
    x = np.array([0.25])
    action = fractional_kelly(scalar_model, scalar_vc, 0.3, x)
    assert action.kelly_fraction == 0.5  # theta = 1
    # midpoint structure at theta = 1
    expected = 0.5 * action.kelly + 0.5 * (action.bench_track - action.hedge)
    assert np.abs(action.allocation - expected).max() < 1e-12


def test_pure_fractional_kelly_degenerate_benchmark():
    spec = ModelSpec.constant(
        n=1, m=1, d=1, horizon_years=1.0, theta=3.0, x0=[0.0],
        asset_drift=[0.04], asset_factor_loading=[[0.5]], asset_vol=[[0.2]],
    )
    vm = validate_model(spec)
    vc = solve_value_coefficients(vm, steps_per_year=252)
    action = fractional_kelly(vm, vc, 0.1, np.array([0.2]))
    assert np.all(action.bench_track == 0.0) and np.all(action.hedge == 0.0)
    assert np.abs(action.allocation - 0.25 * action.kelly).max() < 1e-14


def test_decomposition_reproduces_optimal(solved_random):
    for vm, vc, rng in solved_random:
        for _ in range(30):
            t = float(rng.uniform(0, vm.horizon))
            x = rng.standard_normal(vm.n)
            action = fractional_kelly(vm, vc, t, x)
            h = optimal_h(vm, vc, t, x)
            assert np.abs(action.allocation - h).max() <= 1e-12 * (1.0 + np.abs(h).max())
            # regularized form: h* = kelly + (SS)^-1 Sigma gamma*
            gram = vm.gram_blocks(t)
            sigma = vm.coefficients(t).asset_vol
            reg = action.kelly + gram.ss_solve(sigma @ action.tilt)
            assert np.abs(action.allocation - reg).max() <= 1e-12 * (1.0 + np.abs(h).max())


@settings(max_examples=30, deadline=None)
@given(
    x=st.floats(-3, 3, allow_nan=False),
    y=st.floats(-3, 3, allow_nan=False),
    t=st.floats(0.0, 1.0, allow_nan=False),
)
def test_policies_affine_in_state(scalar_model, scalar_vc, x, y, t):
    xa, xb = np.array([x]), np.array([y])
    mid = 0.5 * (xa + xb)
    for fn in (optimal_h, optimal_gamma, optimal_nu):
        fa = fn(scalar_model, scalar_vc, t, xa)
        fb = fn(scalar_model, scalar_vc, t, xb)
        fm = fn(scalar_model, scalar_vc, t, mid)
        assert np.abs(fm - 0.5 * (fa + fb)).max() <= 1e-12 * (1.0 + np.abs(fm).max())


def test_batch_evaluators_match_pointwise(solved_random):
    for vm, vc, rng in solved_random:
        t = float(rng.uniform(0, vm.horizon))
        X = rng.standard_normal((7, vm.n))
        H = batch_allocation(vm, vc, t, X)
        H2 = batch_allocation(vm, vc, t, X, route="twostep")
        G = batch_gamma(vm, vc, t, X, H)
        NU = batch_nu(vm, vc, t, X)
        K = batch_kelly(vm, t, X)
        for i, x in enumerate(X):
            assert np.abs(H[i] - optimal_h(vm, vc, t, x)).max() < 1e-13 * (1 + np.abs(H[i]).max())
            assert np.abs(H2[i] - optimal_h(vm, vc, t, x, "twostep")).max() < 1e-13 * (1 + np.abs(H[i]).max())
            assert np.abs(G[i] - optimal_gamma(vm, vc, t, x)).max() < 1e-12 * (1 + np.abs(G[i]).max())
            assert np.abs(NU[i] - optimal_nu(vm, vc, t, x)).max() < 1e-13 * (1 + np.abs(NU[i]).max())
            assert np.abs(K[i] - fractional_kelly(vm, vc, t, x).kelly).max() < 1e-13 * (1 + np.abs(K[i]).max())
