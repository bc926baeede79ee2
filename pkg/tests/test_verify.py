import math

import numpy as np
import pytest

from skir_graphon.model import BlockGraphon, ControlBound, GroupParams
from skir_graphon.solver import Coefficients, TimeGrid, residual_norm, solve_equilibrium
from skir_graphon.verify import (
    SimConfig,
    analytic_decoupled,
    best_response,
    best_response_value,
    evaluate_controls,
    exploitability,
    perturb_controls,
    simulate_finite_player,
    with_controls,
)

from conftest import P0, POLICY0, age_graphon, age_params

S, K, I, R = range(4)


# ---- analytic oracle


def test_analytic_flows_one_horizon():
    grid = TimeGrid(1.0, 100)
    a = analytic_decoupled(grid, age_params()[:1], POLICY0)
    assert not a.u[:, 0, S].any() and not a.u[:, 0, R].any()
    assert a.u[0, 0, I] == pytest.approx(0.75 ** 2 / 0.4 * (1 - math.exp(-0.1)))
    np.testing.assert_allclose(a.p[:, 0, S], 0.95)
    np.testing.assert_allclose(a.p.sum(axis=-1), 1.0)


def test_analytic_rejects_relapse():
    with pytest.raises(ValueError):
        analytic_decoupled(TimeGrid(1.0, 10), age_params(gamma=0.1), POLICY0)


# ---- exploitability


def test_equilibrium_has_no_profitable_deviation(exp1):
    sc, res = exp1
    br = best_response(res, sc.grid, sc.params, sc.policy, sc.bound)
    assert br.gap0.min() >= -1e-10
    assert br.gap0.max() <= 10 * sc.solver.tol
    assert exploitability(res, sc.grid, sc.params, sc.policy, sc.bound) <= 1e-4


def test_best_response_value_per_block(exp1):
    sc, res = exp1
    u_br, u_eq = best_response_value(res, 2, sc.grid, sc.params, sc.policy, sc.bound)
    assert u_br.shape == (4,)
    assert (u_eq - u_br).min() >= -1e-10


def test_perturbation_pays_effort_penalty(exp1):
    sc, res = exp1
    bad = perturb_controls(res, 0.1, sc.bound)
    br = best_response(bad, sc.grid, sc.params, sc.policy, sc.bound)
    assert (br.gap0[:, R] > 0).all()
    # R dynamics are control-free without relapse, so only the effort term is lost
    assert br.gap0[:, R].min() >= 0.5 * 0.01 * sc.grid.T - 10 * sc.grid.dt
    assert exploitability(bad, sc.grid, sc.params, sc.policy, sc.bound) > 0


def test_max_control_is_exploitable(exp1):
    sc, res = exp1
    bad = with_controls(res, np.full_like(res.flows.phi, sc.bound.a_max))
    assert exploitability(bad, sc.grid, sc.params, sc.policy, sc.bound) > 1.0


def test_evaluation_matches_best_response_at_optimum(exp1):
    sc, res = exp1
    f = res.flows
    u_eq = evaluate_controls(sc.grid, sc.params, sc.policy, f.phi, f.z_k, f.z_i)
    assert np.abs(u_eq - f.u).max() <= 1e-6


def test_zero_graphon_analytic_controls_are_optimal():
    grid = TimeGrid(10.0, 1000)
    params = age_params()
    res = solve_equilibrium(grid, age_graphon().scaled(0.0), params, POLICY0)
    exact = analytic_decoupled(grid, params, POLICY0)
    ex = exploitability(with_controls(res, exact.phi), grid, params, POLICY0)
    assert abs(ex) <= 1e-9


# ---- finite-player simulation


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(0)
    with pytest.raises(ValueError):
        SimConfig(10, method="tau_leap")
    with pytest.raises(ValueError):
        SimConfig(10, method="euler")


def zero_graphon_setup(T=1.0, n=1000):
    grid = TimeGrid(T, n)
    params = age_params()[:1]
    g = BlockGraphon([[0.0]], [1.0])
    return grid, params, g, solve_equilibrium(grid, g, params, POLICY0)


def test_single_agent_without_contacts():
    grid, params, g, res = zero_graphon_setup()
    for seed in range(20):
        sim = simulate_finite_player(res, grid, g, params, POLICY0, SimConfig(1, seed))
        if sim.counts[0, 0, S] == 1:
            assert (sim.counts[:, 0, S] == 1).all()
            assert sim.per_agent_cost[0] == 0.0
            return
    pytest.fail("no seed started the agent in S")


def test_counts_are_conserved(exp1):
    sc, res = exp1
    sim = simulate_finite_player(res, sc.grid, sc.graphon, sc.params, sc.policy, SimConfig(300, 4))
    totals = sim.counts.sum(axis=(1, 2))
    assert (totals == 300).all()
    assert (sim.counts >= 0).all()
    assert (sim.counts.sum(axis=-1) == sim.block_sizes).all()


def test_simulation_is_reproducible(exp1):
    sc, res = exp1
    a = simulate_finite_player(res, sc.grid, sc.graphon, sc.params, sc.policy, SimConfig(200, 9))
    b = simulate_finite_player(res, sc.grid, sc.graphon, sc.params, sc.policy, SimConfig(200, 9))
    np.testing.assert_array_equal(a.counts, b.counts)
    np.testing.assert_array_equal(a.per_agent_cost, b.per_agent_cost)
    c = simulate_finite_player(res, sc.grid, sc.graphon, sc.params, sc.policy, SimConfig(200, 10))
    assert not np.array_equal(a.counts, c.counts)


def test_zero_graphon_exponential_decay():
    grid, params, g, res = zero_graphon_setup()
    sim = simulate_finite_player(res, grid, g, params, POLICY0, SimConfig(10_000, 3))
    n0 = sim.counts[0, 0, K]
    q = math.exp(-0.1)
    se = math.sqrt(q * (1 - q) / n0)
    assert abs(sim.counts[-1, 0, K] / n0 - q) <= 3 * se


def test_zero_graphon_cost_matches_value():
    grid, params, g, res = zero_graphon_setup(T=10.0)
    sim = simulate_finite_player(res, grid, g, params, POLICY0, SimConfig(20_000, 5))
    value = (np.array(P0) * res.flows.u[0, 0]).sum()
    assert abs(sim.mean_cost_per_block[0] - value) <= 3 * sim.cost_se_per_block[0]


@pytest.mark.slow
def test_cost_matches_value_across_seeds(exp1):
    # agents within one run share the empirical measure, so the spread is
    # measured across independent runs
    sc, res = exp1
    br = best_response(res, sc.grid, sc.params, sc.policy, sc.bound)
    value = (Coefficients.from_params(sc.params).p0 * br.u_eq[0]).sum(axis=1)
    runs = np.array([simulate_finite_player(res, sc.grid, sc.graphon, sc.params, sc.policy,
                                            SimConfig(2000, seed)).mean_cost_per_block
                     for seed in range(20)])
    se = runs.std(axis=0, ddof=1) / math.sqrt(len(runs))
    assert (np.abs(runs.mean(axis=0) - value) <= 3 * se).all()


def test_tau_leap_agrees_with_exact(exp1):
    sc, res = exp1
    dev = {}
    for method, tau in (("exact_gillespie", None), ("tau_leap", 0.001)):
        runs = [simulate_finite_player(res, sc.grid, sc.graphon, sc.params, sc.policy,
                                       SimConfig(1000, seed, method, tau)).empirical_p
                for seed in range(5)]
        dev[method] = np.mean(runs, axis=0)
    # both averages sit near the mean-field flow and near each other
    for mean in dev.values():
        assert np.abs(mean - res.flows.p).max() < 0.06
    assert np.abs(dev["exact_gillespie"] - dev["tau_leap"]).max() < 0.08


@pytest.mark.slow
def test_deviation_shrinks_with_population(exp1):
    sc, res = exp1
    means = []
    for n in (250, 1000, 4000):
        devs = [np.abs(simulate_finite_player(res, sc.grid, sc.graphon, sc.params, sc.policy,
                                              SimConfig(n, seed)).empirical_p - res.flows.p).max()
                for seed in range(20)]
        means.append(np.mean(devs))
    assert means[0] > means[1] > means[2]


def test_residual_norm_zero_for_identical_results(exp1):
    _, res = exp1
    assert residual_norm(res.flows, res.flows.copy()) == 0.0


def test_perturb_respects_bound(exp1):
    sc, res = exp1
    bad = perturb_controls(res, 10.0, ControlBound(5.0))
    assert bad.flows.phi.max() == 5.0
    assert res.flows.phi.max() < 5.0
