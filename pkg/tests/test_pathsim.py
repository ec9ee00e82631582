import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backward_mfg.model import TimeGrid, coupling_weights, reference_example
from backward_mfg.pathsim import (
    RngStreamSpec, ValidationFailed, brownian_increments, mean_state_algebraic, simulate_agent,
    simulate_agents, simulate_population, synthesize,
)
from backward_mfg.verify import decoupling_residual, feedback_control_residual, stationarity_residual


@pytest.fixture(scope="module")
def game_1000():
    return synthesize(reference_example(), "game", TimeGrid(1.0, 1000))


def test_mean_zeta_initial_value(game_1000):
    assert game_1000.Ezeta[0][0] == pytest.approx((1 - 0.5 / 30) * 2 * 1, abs=1e-15)
    assert game_1000.Ezeta[0][0] == pytest.approx(1.966667, abs=1e-6)


def test_mean_zeta_vanishes_without_sources():
    syn = synthesize(reference_example(Q=0.0, G=0.0, f=0.0, eta1=0.0, eta0=0.0), "game", TimeGrid(1.0, 100))
    assert not np.any(syn.Ezeta.values)


def test_mean_zeta_grows_linearly_at_the_running_offset():
    # B = C = A = 0 removes every matrix term; the drift is the constant running offset.
    p = reference_example(A=0.0, B=0.0, C=0.0, f=0.0)
    syn = synthesize(p, "game", TimeGrid(1.0, 100))
    w = coupling_weights(p, "game")
    expected = w.zeta0 + np.outer(syn.grid.nodes, w.eta_run)
    np.testing.assert_allclose(syn.Ezeta.values, expected, atol=1e-13)


def test_mean_state_vanishes_without_sources(zero_weight):
    syn = synthesize(zero_weight, "game", TimeGrid(1.0, 100))
    assert not np.any(syn.Ex.values)


def test_mean_state_terminal_value(game_1000):
    assert game_1000.Ex[-1][0] == 0.0


@pytest.mark.parametrize("mode", ["game", "social"])
def test_two_routes_to_mean_state(mode, example, social_example, two_dim, two_dim_social):
    for p in ((example, two_dim) if mode == "game" else (social_example, two_dim_social)):
        syn = synthesize(p, mode, TimeGrid(1.0, 2000))
        alg = mean_state_algebraic(syn.bundle, syn.moments, syn.Ezeta)
        assert np.abs(syn.Ex.values - alg).max() <= 1e-6


def test_zero_weight_model_stays_at_rest(zero_weight):
    ens = simulate_agents(synthesize(zero_weight, "game", TimeGrid(1.0, 200)), range(5), seed=1)
    for arr in (ens.x, ens.z, ens.u, ens.zeta):
        assert not np.any(arr)


def test_terminal_state_equals_terminal_data(game_1000, two_dim):
    ens = simulate_agents(game_1000, range(30), seed=11)
    assert np.array_equal(ens.x[:, -1, 0], ens.W[:, -1])
    ens2 = simulate_agents(synthesize(two_dim, "game", TimeGrid(1.0, 300)), range(10), seed=2)
    assert np.array_equal(ens2.x[:, -1], ens2.xi)


def test_control_formulas_agree(game_1000):
    ens = simulate_agents(game_1000, range(30), seed=5)
    p = game_1000.params
    scale = 1 + np.abs(ens.phat).max()
    for j in range(ens.size):
        agent = ens.agent(j)
        assert stationarity_residual(agent, p) <= 1e-13 * scale
        assert feedback_control_residual(agent, game_1000) <= 1e-9


def test_stationarity_detects_control_perturbation(game_1000):
    agent = simulate_agents(game_1000, [0], seed=5).agent(0)
    bumped = type(agent)(**{**agent.__dict__, "u": agent.u + 0.1})
    assert stationarity_residual(bumped, game_1000.params) == pytest.approx(0.5, abs=1e-12)


def test_sample_mean_of_terminal_state(game_1000):
    ens = simulate_agents(game_1000, range(30), seed=8)
    assert abs(ens.x[:, -1, 0].mean()) <= 3 / math.sqrt(30)


def test_output_independent_of_worker_count(game_1000):
    one = simulate_agents(game_1000, range(12), seed=3, workers=1)
    four = simulate_agents(game_1000, range(12), seed=3, workers=4)
    for name in ("W", "phi", "zeta", "phat", "x", "z", "u"):
        assert np.array_equal(getattr(one, name), getattr(four, name))


def test_single_agent_matches_its_row_in_a_population(game_1000):
    ens = simulate_agents(game_1000, range(7), seed=3)
    solo = simulate_agent(game_1000, RngStreamSpec(3, 4))
    assert np.array_equal(solo.x, ens.x[4]) and np.array_equal(solo.zeta, ens.zeta[4])


def test_streams_are_pure_functions_of_seed_and_agent():
    grid = TimeGrid(1.0, 50)
    a = RngStreamSpec(9, 2).increments(grid)
    assert np.array_equal(a, RngStreamSpec(9, 2).increments(grid))
    assert not np.array_equal(a, RngStreamSpec(9, 3).increments(grid))
    assert not np.array_equal(a, RngStreamSpec(10, 2).increments(grid))


def test_increment_variance():
    grid = TimeGrid(1.0, 100)
    dW = brownian_increments(0, range(2000), grid)
    assert dW.var() == pytest.approx(grid.dt, rel=0.02)


@settings(max_examples=10, deadline=None)
@given(st.permutations(list(range(6))))
def test_agents_are_exchangeable(order):
    syn = synthesize(reference_example(N=6), "game", TimeGrid(1.0, 50))
    base = simulate_agents(syn, range(6), seed=1)
    perm = simulate_agents(syn, order, seed=1)
    assert np.array_equal(perm.x, base.x[list(order)])
    np.testing.assert_allclose(perm.xbar, base.xbar, atol=1e-14)


def test_population_single_zero_agent(zero_weight):
    ens = simulate_population(zero_weight.replace(N=1), "game", seed=0, grid=TimeGrid(1.0, 50))
    assert ens.size == 1 and ens.costs.J_soc == 0.0


def test_population_replications_use_disjoint_streams(example):
    grid = TimeGrid(1.0, 50)
    r0 = simulate_population(example, "game", 1, grid, replication=0)
    r1 = simulate_population(example, "game", 1, grid, replication=1)
    assert list(r1.agent_ids) == list(range(30, 60))
    assert not np.array_equal(r0.W, r1.W)
    assert (r0.costs.J >= 0).all()


def test_social_mode_rejects_game_only_data(example):
    with pytest.raises(ValidationFailed, match="Q_Γ"):
        synthesize(example, "social", TimeGrid(1.0, 10))


def test_printed_variant_breaks_decoupling(game_1000):
    p = game_1000.params
    printed = synthesize(p, "game", game_1000.grid, phat_variant="printed")
    derived = decoupling_residual(simulate_agents(game_1000, range(30), seed=1))
    other = decoupling_residual(simulate_agents(printed, range(30), seed=1))
    assert derived.sup <= 1e-9
    assert other.sup > 1e-3
    with pytest.raises(ValueError):
        synthesize(p, "game", game_1000.grid, phat_variant="guess")
