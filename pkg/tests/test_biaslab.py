import itertools

import numpy as np
import pytest

from vamlab import biaslab
from vamlab.biaslab import (DiscreteFunctional, bias_vs_variance_sweep, grid_minimize,
                            itervaml_floor_check, lemma2_directional_derivative, lemma2_loss,
                            lemma2_minimizer, model_loss_equivalence, muzero_grid_minimizer,
                            muzero_population_loss, muzero_population_minimizer,
                            population_itervaml_loss, verification_report)
from vamlab.errors import ConfigurationError
from vamlab.mdp import TabularMRP, exact_value
from vamlab.models import LowRankModel

HALF = DiscreteFunctional.uniform([0.0, 1.0])


def random_functional(rng, size=None):
    size = size or int(rng.integers(1, 21))
    mu = rng.dirichlet(np.ones(size))
    mu[-1] = 1.0 - mu[:-1].sum()
    return DiscreteFunctional(np.arange(size), mu, rng.normal(scale=3.0, size=size))


def brute_muzero_loss(mrp, V_prime, V_hat):
    """Loop over (x0, model successor, x1, x2) with the model fixed to p."""
    P, r, gamma, n = mrp.transition, mrp.reward, mrp.discount, mrp.n_states
    total = 0.0
    for x0, y, x1, x2 in itertools.product(range(n), repeat=4):
        w = P[x0, y] * P[x0, x1] * P[x1, x2] / n
        total += w * (V_hat[y] - r[x1] - gamma * V_prime[x2]) ** 2
    return total


# --- Lemma 2 functional -------------------------------------------------------------

def test_loss_at_g_equals_variance():
    assert lemma2_loss(HALF.g, HALF) == pytest.approx(0.25, abs=1e-15)
    assert HALF.variance == 0.25


def test_two_point_minimizer():
    f = lemma2_minimizer(HALF)
    np.testing.assert_allclose(f, [0.25, 0.75], atol=1e-15)
    assert lemma2_loss(f, HALF) == pytest.approx(0.1875, abs=1e-15)
    point, value = grid_minimize(lambda X: lemma2_loss(X, HALF), [0.0, 0.0], radius=2.0, step=1e-3)
    np.testing.assert_allclose(point, [0.25, 0.75], atol=1e-3)
    assert value == pytest.approx(0.1875, abs=1e-6)


def test_constant_target_is_its_own_minimizer():
    fn = DiscreteFunctional.uniform([2.0, 2.0, 2.0])
    f = np.array([1.0, 2.5, 4.0])
    assert lemma2_loss(f, fn) == pytest.approx(np.mean((f - 2.0) ** 2))
    np.testing.assert_allclose(lemma2_minimizer(fn), fn.g)


def test_loss_accepts_stacked_points():
    F = np.array([[0.0, 1.0], [0.25, 0.75]])
    np.testing.assert_allclose(lemma2_loss(F, HALF), [0.25, 0.1875])


def test_descent_examples():
    chk = lemma2_directional_derivative(HALF)
    assert chk.variance == 0.25 and chk.analytic_slope == -0.25 and chk.descends
    assert lemma2_loss(0.99 * HALF.g, HALF) < lemma2_loss(HALF.g, HALF)
    flat = lemma2_directional_derivative(DiscreteFunctional.uniform([3.0, 3.0]))
    assert flat.variance == 0.0 and abs(flat.fd_slope) < 1e-6 and not flat.descends


def test_slope_on_ten_points():
    fn = random_functional(np.random.default_rng(5), size=10)
    chk = lemma2_directional_derivative(fn)
    assert abs(chk.fd_slope + fn.variance) < 1e-6


def test_functional_validation():
    with pytest.raises(ConfigurationError):
        DiscreteFunctional(np.arange(2), [0.6, 0.6], [0.0, 1.0])
    with pytest.raises(ConfigurationError):
        DiscreteFunctional(np.arange(2), [0.5, 0.5], [0.0, 1.0, 2.0])
    with pytest.raises(ConfigurationError):
        lemma2_loss([0.0], HALF)


def test_lemma2_on_random_functionals():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        fn = random_functional(rng)
        chk = lemma2_directional_derivative(fn)
        assert abs(chk.fd_slope + fn.variance) < 1e-6
        f_star = lemma2_minimizer(fn)
        gap = lemma2_loss(fn.g, fn) - lemma2_loss(f_star, fn)
        assert (gap > 0) == (fn.variance > 1e-9)
        # independent check of optimality: no perturbation improves on f*
        base = lemma2_loss(f_star, fn)
        deltas = rng.normal(scale=1e-3, size=(16, fn.g.size))
        assert np.all(lemma2_loss(f_star + deltas, fn) >= base - 1e-12)


# --- grid oracle -------------------------------------------------------------------------

def test_grid_minimize_finds_quadratic_minimum():
    target = np.array([0.3141, -1.2718, 0.5])
    point, value = grid_minimize(lambda X: np.sum((X - target) ** 2, axis=1), np.zeros(3))
    np.testing.assert_allclose(point, target, atol=1e-3)
    assert value < 3e-6


# --- MuZero population minimizer --------------------------------------------------------------

def test_population_loss_matches_brute_force_enumeration():
    rng = np.random.default_rng(3)
    mrp = biaslab.random_mrp(3, rng)
    Vp = rng.normal(size=3)
    for V_hat in rng.normal(size=(4, 3)):
        assert muzero_population_loss(mrp, Vp, V_hat)[0] == pytest.approx(
            brute_muzero_loss(mrp, Vp, V_hat), rel=1e-12)


def test_two_state_uniform_gap():
    mrp = biaslab.two_state_uniform()
    V_star = exact_value(mrp)
    np.testing.assert_allclose(V_star, [5.5, 4.5], rtol=1e-12)
    res = muzero_population_minimizer(mrp, V_star)
    np.testing.assert_allclose(res.backup, V_star, rtol=1e-12)
    np.testing.assert_allclose(res.values, [5.0, 5.0], rtol=1e-12)
    np.testing.assert_allclose(res.gap, [-0.5, 0.5], rtol=1e-12)
    assert res.gap_norm == pytest.approx(np.sqrt(0.5))
    point, _ = muzero_grid_minimizer(mrp, V_star, radius=2.0, step=1e-3)
    assert np.max(np.abs(point - res.values)) <= 2e-3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_three_state_closed_form_matches_grid(seed):
    rng = np.random.default_rng(seed)
    mrp = biaslab.random_mrp(3, rng)
    V_star = exact_value(mrp)
    res = muzero_population_minimizer(mrp, V_star)
    assert res.gap_norm > 1e-3
    point, _ = muzero_grid_minimizer(mrp, V_star)
    assert np.max(np.abs(point - res.values)) <= 2e-3


def test_deterministic_kernel_has_no_bias():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        mrp = biaslab.random_mrp(int(rng.integers(2, 8)), rng, deterministic=True)
        res = muzero_population_minimizer(mrp, rng.normal(scale=5.0, size=mrp.n_states))
        worst = max(worst, float(np.max(np.abs(res.gap))))
    assert worst < 1e-9


def test_constant_target_has_no_bias():
    rng = np.random.default_rng(4)
    P = rng.dirichlet(np.ones(4), size=4)
    for mrp in (TabularMRP(P, np.zeros(4), 0.9), TabularMRP(P, np.full(4, 1.3), 0.9)):
        res = muzero_population_minimizer(mrp, np.full(4, -2.0))
        assert np.max(np.abs(res.gap)) < 1e-12


def test_constant_value_with_varying_reward_is_still_biased():
    # the reward part r(x1) of the target varies with x1 even when V' is flat
    res = muzero_population_minimizer(biaslab.two_state_uniform(), np.full(2, 3.0))
    np.testing.assert_allclose(res.values, [3.2, 3.2])
    np.testing.assert_allclose(res.gap, [-0.5, 0.5])


def test_unreachable_states_are_excluded():
    P = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [1.0, 0.0, 0.0]])
    mrp = TabularMRP(P, np.array([1.0, 0.0, 2.0]), 0.9)
    res = muzero_population_minimizer(mrp, np.zeros(3))
    assert res.excluded == (2,)
    assert np.isnan(res.values[2]) and res.gap[2] == 0.0
    assert np.all(np.isfinite(res.values[:2]))


def test_inject_fault_moves_the_minimizer():
    mrp = biaslab.two_state_uniform()
    good = muzero_population_minimizer(mrp, exact_value(mrp))
    bad = muzero_population_minimizer(mrp, exact_value(mrp), inject_fault=True)
    assert np.max(np.abs(good.values - bad.values)) > 0.1


def test_bias_sweep():
    rows = bias_vs_variance_sweep()
    assert [r.scale for r in rows] == [0.0, 0.5, 1.0, 2.0, 4.0]
    assert rows[0].variance == 0.0 and rows[0].bias_norm == 0.0
    by_scale = {r.scale: r for r in rows}
    for s in (0.5, 1.0, 2.0):
        assert by_scale[2 * s].variance == pytest.approx(4 * by_scale[s].variance)
        assert by_scale[2 * s].bias_norm > by_scale[s].bias_norm
    assert all(b.bias_norm - a.bias_norm >= -1e-9 for a, b in zip(rows, rows[1:]))
    assert by_scale[1.0].bias_norm == pytest.approx(np.sqrt(0.5))


# --- IterVAML floor ------------------------------------------------------------------------

def test_floor_examples():
    chk = itervaml_floor_check(biaslab.two_state_uniform(), [0.0, 1.0])
    assert chk.floor == 0.25 and chk.achieved == 0.25 and chk.excess == 0.0
    det = biaslab.random_mrp(5, np.random.default_rng(0), deterministic=True)
    chk = itervaml_floor_check(det, np.arange(5.0))
    assert chk.floor == 0.0 and abs(chk.excess) <= 1e-12


def test_floor_on_ten_states_and_random_models():
    rng = np.random.default_rng(10)
    mrp = biaslab.random_mrp(10, rng)
    V = rng.normal(size=10)
    chk = itervaml_floor_check(mrp, V)
    assert abs(chk.excess) <= 1e-12
    for i in range(100):
        model = LowRankModel.random(10, int(rng.integers(1, 11)), seed=i, init_scale=2.0)
        assert population_itervaml_loss(mrp, model.probs(), V) >= chk.floor - 1e-12
    assert population_itervaml_loss(mrp, mrp.transition, V) == pytest.approx(chk.floor, abs=1e-12)


# --- model-loss equivalence ------------------------------------------------------------------------

def test_model_loss_equivalence_on_three_states():
    rng = np.random.default_rng(1)
    mrp = biaslab.random_mrp(3, rng)
    chk = model_loss_equivalence(mrp, rng.normal(size=3), rng.normal(size=3), rng.normal(size=3))
    assert chk.grid_points == 61**3
    assert chk.same_argmin
    assert chk.offset_spread < 1e-10


# --- report ---------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def report():
    return verification_report()


def test_report_passes(report):
    assert report.passed, report.render()
    names = [c.name for c in report.checks]
    assert len(names) == len(set(names)) >= 10
    assert all(c.passed for c in report.checks)


def test_report_serializes(report):
    d = report.to_dict()
    assert d["passed"] is True and len(d["checks"]) == len(report.checks)
    assert "PASS" in report.render()


def test_fault_injection_fails_the_report():
    bad = verification_report(inject_fault=True, trials=50, n_models=5)
    assert not bad.passed
    assert any(not c.passed and c.name.startswith("prop2") for c in bad.checks)
