from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rldp.envdata import Dataset, GridWorld, exhaustive_dataset
from rldp.oracle import (ConvergenceError, TabularMdp, TabularPolicy, gridworld_mdp, latent_mdp,
                         lemma_bound_report, policy_evaluation, q_from_measure, quantized_groups,
                         sm_fixed_point_check, state_visitation, successor_measure_exact, value_iteration)
from rldp.replearn import EncoderParams, identity_encoder


def chain_mdp(gamma=0.9):
    # 0 -> 1 under every action, 1 absorbing
    P = np.zeros((2, 2, 2))
    P[:, :, 1] = 1.0
    return TabularMdp(P, [0.5, 0.5], gamma)


def random_mdp(rng, S, A, gamma):
    P = rng.random((S, A, S)) ** 3
    P /= P.sum(axis=2, keepdims=True)
    rho = rng.random(S) + 0.05
    return TabularMdp(P, rho / rho.sum(), gamma)


mdp_params = st.tuples(st.integers(1, 20), st.integers(1, 4), st.floats(0.0, 0.95), st.integers(0, 2**31 - 1))


# -- successor measure ------------------------------------------------------

def test_chain_measure_geometric_series():
    M = successor_measure_exact(chain_mdp(), TabularPolicy.uniform(2, 2))
    np.testing.assert_allclose(M[0, :, 1], 10.0, atol=1e-9)
    assert np.all(M[:, :, 0] == 0.0)  # state 0 is never a successor


@settings(max_examples=25, deadline=None)
@given(mdp_params)
def test_mass_identity(params):
    S, A, gamma, seed = params
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, S, A, gamma)
    M = successor_measure_exact(mdp, TabularPolicy.random(S, A, rng))
    np.testing.assert_allclose(M.sum(axis=2), 1.0 / (1.0 - gamma), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(mdp_params)
def test_measure_q_matches_policy_evaluation(params):
    S, A, gamma, seed = params
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, S, A, gamma)
    pi = TabularPolicy.random(S, A, rng)
    r = rng.normal(size=S)
    np.testing.assert_allclose(q_from_measure(successor_measure_exact(mdp, pi), r),
                               policy_evaluation(mdp, pi, r), atol=1e-8)


def test_q_from_measure_trivial_rewards():
    mdp = chain_mdp()
    M = successor_measure_exact(mdp, TabularPolicy.uniform(2, 2))
    np.testing.assert_allclose(q_from_measure(M, np.ones(2)), 10.0, atol=1e-9)
    assert np.all(q_from_measure(M, np.zeros(2)) == 0.0)
    np.testing.assert_allclose(q_from_measure(M, [0.0, 1.0])[0], 10.0, atol=1e-9)


def test_unreachable_state_has_zero_measure():
    layout = "\n".join(["#####", "#..##", "#####", "##.##", "#####"])
    env = GridWorld(layout)
    M = successor_measure_exact(gridworld_mdp(env, 0.9), TabularPolicy.uniform(env.n_free, 4))
    isolated = env.index[(2, 3)]
    assert np.all(M[: isolated, :, isolated] == 0.0)


def test_non_stochastic_transitions_rejected():
    P = np.full((2, 1, 2), 0.6)
    with pytest.raises(ValueError):
        TabularMdp(P, [0.5, 0.5], 0.9)


def test_iteration_cap_is_an_error(monkeypatch):
    import rldp.oracle as oracle
    monkeypatch.setattr(oracle, "MAX_ITERS", 3)
    with pytest.raises(ConvergenceError):
        successor_measure_exact(chain_mdp(0.99), TabularPolicy.uniform(2, 2))


# -- value iteration --------------------------------------------------------

def test_value_iteration_zero_reward():
    Q, _ = value_iteration(chain_mdp(), np.zeros(2))
    assert np.all(Q == 0.0)


def test_value_iteration_single_absorbing_state():
    mdp = TabularMdp(np.ones((1, 1, 1)), [1.0], 0.9)
    Q, _ = value_iteration(mdp, [1.0])
    assert Q[0, 0] == pytest.approx(10.0, abs=1e-9)


def bfs_distances(env, goal):
    dist = {goal: 0}
    queue = deque([goal])
    while queue:
        c = queue.popleft()
        for a in range(4):
            # moves are reversible in a gridworld, so forward BFS from the goal is valid
            n = env.step(c, a)
            if n not in dist:
                dist[n] = dist[c] + 1
                queue.append(n)
    return dist


@pytest.mark.parametrize("goal", [(3, 2), (9, 9)])
def test_greedy_paths_are_shortest(goal):
    env = GridWorld()
    mdp = gridworld_mdp(env, 0.98)
    r = np.zeros(env.n_free)
    r[env.index[goal]] = 1.0
    _, greedy = value_iteration(mdp, r)
    dist = bfs_distances(env, goal)
    for c in env.free_cells:
        if c == goal:
            continue
        steps, x = 0, c
        while x != goal:
            x = env.step(x, int(np.argmax(greedy.probs[env.index[x]])))
            steps += 1
            assert steps <= 200
        assert steps == dist[c]


@settings(max_examples=25, deadline=None)
@given(mdp_params, st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_greedy_invariant_to_positive_affine_rewards(params, c, b):
    S, A, gamma, seed = params
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, S, A, gamma)
    r = rng.normal(size=S)
    Q, greedy = value_iteration(mdp, r)
    _, greedy2 = value_iteration(mdp, c * r + b)
    # only compare states whose best action is clearly separated
    top2 = np.sort(Q, axis=1)[:, -2:] if A > 1 else np.zeros((S, 2))
    clear = (top2[:, 1] - top2[:, 0]) > 1e-6 if A > 1 else np.ones(S, bool)
    np.testing.assert_array_equal(greedy.probs[clear], greedy2.probs[clear])


# -- fixed-point check ------------------------------------------------------

def test_planted_density_scores_zero():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng, 6, 2, 0.9)
    pi = TabularPolicy.random(6, 2, rng)
    M = successor_measure_exact(mdp, pi)
    assert sm_fixed_point_check(mdp, pi, M / mdp.rho[None, None, :]) == pytest.approx(0.0, abs=1e-12)


def test_zero_density_scores_max_mass():
    rng = np.random.default_rng(1)
    mdp = random_mdp(rng, 5, 3, 0.8)
    pi = TabularPolicy.uniform(5, 3)
    M = successor_measure_exact(mdp, pi)
    assert sm_fixed_point_check(mdp, pi, np.zeros_like(M)) == pytest.approx(M.max(), abs=1e-12)


def test_zero_rho_rejected():
    P = np.zeros((2, 1, 2))
    P[:, :, 1] = 1.0
    mdp = TabularMdp(P, [0.0, 1.0], 0.5)
    with pytest.raises(ValueError, match="rho"):
        sm_fixed_point_check(mdp, TabularPolicy.uniform(2, 1), np.zeros((2, 1, 2)))


# -- visitation, aggregation, text format -----------------------------------

def test_visitation_is_distribution():
    rng = np.random.default_rng(2)
    mdp = random_mdp(rng, 7, 3, 0.9)
    d = state_visitation(mdp, TabularPolicy.random(7, 3, rng))
    assert d.sum() == pytest.approx(1.0, abs=1e-12) and (d >= 0).all()


def test_quantized_groups_numbered_by_first_occurrence():
    emb = np.array([[1.0, 0.0], [0.0, 1.0], [1.0 + 1e-9, 0.0], [0.0, 1.0]])
    assert quantized_groups(emb).tolist() == [0, 1, 0, 1]


def test_singleton_groups_reproduce_mdp():
    rng = np.random.default_rng(3)
    mdp = random_mdp(rng, 5, 2, 0.9)
    pi = TabularPolicy.random(5, 2, rng)
    bar, pi_bar = latent_mdp(mdp, pi, np.arange(5))
    np.testing.assert_allclose(bar.P, mdp.P, atol=1e-15)
    np.testing.assert_allclose(pi_bar, pi.probs, atol=1e-15)


def test_text_round_trip(tmp_path):
    mdp = random_mdp(np.random.default_rng(4), 3, 2, 0.7)
    mdp.save(tmp_path / "m.txt")
    back = TabularMdp.load(tmp_path / "m.txt")
    np.testing.assert_array_equal(back.P, mdp.P)
    np.testing.assert_array_equal(back.rho, mdp.rho)
    assert back.gamma == mdp.gamma


def test_hand_written_text_fixture():
    text = """# two states, one action
n_states 2
n_actions 1
gamma 0.5
P 0 1 0 1
rho 0.25 0.75
"""
    mdp = TabularMdp.from_text(text)
    M = successor_measure_exact(mdp, TabularPolicy.uniform(2, 1))
    np.testing.assert_allclose(M[:, 0, 1], 2.0, atol=1e-9)


# -- bound report -----------------------------------------------------------

def test_identity_abstraction_bound():
    env = GridWorld()
    P = env.transition_tensor()
    enc = identity_encoder(P)
    mdp = gridworld_mdp(env, 0.98)
    rep = lemma_bound_report(enc, mdp, TabularPolicy.uniform(env.n_free, 4), exhaustive_dataset(env),
                             env.observe_all())
    assert rep.lhs == 0.0 and rep.lhs <= rep.rhs
    assert abs(rep.loss_dynamics) < 1e-10
    assert rep.n_groups == env.n_free


def test_collapsed_abstraction_has_positive_gap():
    mdp = chain_mdp()
    obs = np.eye(2) * np.sqrt(2)
    enc = EncoderParams(2, 2, 1, 2, phi_hidden=(3, 3), action_proj=2, g_hidden=(4, 4),
                        rng=np.random.default_rng(0))
    enc.params["phi.2.weight"].data[...] = 0.0
    enc.params["phi.2.bias"].data = np.array([1.0, 0.0])
    enc.refresh_target()
    ds = Dataset(obs[[0, 0, 1, 1]], np.array([[0], [1], [0], [1]]), obs[[1, 1, 1, 1]], np.ones(4, bool),
                 np.arange(4), n_actions=2)
    rep = lemma_bound_report(enc, mdp, TabularPolicy.uniform(2, 2), ds, obs)
    assert rep.n_groups == 1 and rep.lhs > 0.0
