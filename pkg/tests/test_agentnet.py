"""Tests for the shared agent network."""

import numpy as np
import pytest

from raca.config.manager import ConfigManager
from raca.core import numerics as nx
from raca.core.agentnet import (
    AgentNet,
    AgentNetSpec,
    agent_q,
    attend,
    build_qkv,
    greedy_actions,
    init_params,
    mean_pool,
    pad_avail,
    pad_observations,
    select_action,
)
from raca.core.arena import INVARIANT_WIDTH, OWN_WIDTH, VARIANT_WIDTH, Arena, ObservationTriple
from raca.core.numerics import Tensor
from raca.core.selftest import check_invariance
from raca.utils.errors import ContractError, DimensionError

SPEC = AgentNetSpec(d_k=8, d_h=8, action_slots=16)


def small_net(pooling="attention", seed=0):
    spec = AgentNetSpec(d_k=8, d_h=8, action_slots=16, pooling=pooling)
    return AgentNet(spec), init_params(spec, np.random.default_rng(seed))


def test_parameter_names_and_count_independent_of_team():
    params = init_params(SPEC, np.random.default_rng(0))
    assert all(name.startswith("agent.") for name in params.names())
    assert params.shapes()["agent.q.w"] == (8, 22)
    assert params.shapes()["agent.rnn.w_x"] == (8 + INVARIANT_WIDTH, 24)
    again = init_params(SPEC, np.random.default_rng(1))
    assert again.num_parameters == params.num_parameters


def test_build_qkv_shapes_and_empty_entities():
    params = init_params(SPEC, np.random.default_rng(0)).constants()
    q, k, v = build_qkv(Tensor(np.ones(OWN_WIDTH)), Tensor(np.ones((3, VARIANT_WIDTH))), params)
    assert q.shape == (1, 8) and k.shape == (3, 8) and v.shape == (3, 8)
    q, k, v = build_qkv(Tensor(np.ones(OWN_WIDTH)), Tensor(np.zeros((0, VARIANT_WIDTH))), params)
    assert k.shape == (0, 8) and v.shape == (0, 8)
    assert np.array_equal(attend(q, k, v).data, np.zeros((1, 8)))


def test_attend_single_entity_returns_its_value():
    value = Tensor([[1.0, 2.0, 3.0, 4.0]])
    out = attend(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))), value)
    assert np.allclose(out.data, value.data)


def test_attend_masked_rows_get_no_weight():
    query = Tensor(np.ones((1, 2)))
    key = Tensor([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    value = Tensor([[1.0, 0.0], [0.0, 1.0], [100.0, 100.0]])
    out = attend(query, key, value, np.array([True, True, False]))
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_mean_pool():
    value = Tensor([[2.0, 0.0], [4.0, 2.0], [9.0, 9.0]])
    assert np.allclose(mean_pool(value, np.array([True, True, False])).data, [[3.0, 1.0]])
    assert np.array_equal(mean_pool(value, np.zeros(3, dtype=bool)).data, np.zeros((1, 2)))


def test_wrong_feature_width_is_a_dimension_error():
    params = init_params(SPEC, np.random.default_rng(0)).constants()
    with pytest.raises(DimensionError):
        build_qkv(Tensor(np.ones(OWN_WIDTH + 1)), Tensor(np.ones((2, VARIANT_WIDTH))), params)


@pytest.mark.parametrize("pooling", ["attention", "mean"])
def test_permutation_and_population_invariance(pooling):
    results = check_invariance(seed=3, pooling=pooling)
    for result in results:
        assert result.passed, result


def test_padding_rows_do_not_change_q_values():
    net, params = small_net()
    consts = params.constants()
    rng = np.random.default_rng(2)
    own = rng.normal(size=(1, OWN_WIDTH))
    variant = rng.normal(size=(1, 3, VARIANT_WIDTH))
    invariant = rng.normal(size=(1, INVARIANT_WIDTH))
    hidden = net.initial_hidden((1,))
    base = net.forward(own, variant, np.ones((1, 3), dtype=bool), invariant, hidden, consts)
    padded_variant = np.concatenate([variant, rng.normal(size=(1, 4, VARIANT_WIDTH))], axis=1)
    padded_mask = np.array([[True] * 3 + [False] * 4])
    padded = net.forward(own, padded_variant, padded_mask, invariant, hidden, consts)
    assert np.allclose(base.q_values.data, padded.q_values.data, atol=1e-12)


def test_agent_q_matches_batched_forward():
    net, params = small_net()
    config = ConfigManager().resolve_arena("3v3_rangers")
    _, observations, _ = Arena(config).reset(0)
    q_single, hidden = agent_q(observations[1], net.initial_hidden(()), params, net)
    own, variant, mask, invariant = pad_observations(observations)
    batched = net.forward(own, variant, mask, invariant, net.initial_hidden((3,)), params.constants())
    assert q_single.shape == (SPEC.n_actions,)
    assert np.allclose(q_single, batched.q_values.data[1])
    assert np.allclose(hidden.data, batched.hidden.data[1])


def test_hidden_state_carries_history():
    net, params = small_net()
    obs = ObservationTriple(
        own=np.ones(OWN_WIDTH), variant=np.ones((2, VARIANT_WIDTH)), invariant=np.ones(INVARIANT_WIDTH)
    )
    q0, h1 = agent_q(obs, net.initial_hidden(()), params, net)
    q1, _ = agent_q(obs, h1, params, net)
    assert not np.allclose(q0, q1)


def test_pad_observations_and_avail():
    obs = [
        ObservationTriple(np.ones(OWN_WIDTH), np.ones((2, VARIANT_WIDTH)), np.ones(INVARIANT_WIDTH)),
        ObservationTriple(np.zeros(OWN_WIDTH), np.zeros((0, VARIANT_WIDTH)), np.zeros(INVARIANT_WIDTH)),
    ]
    own, variant, mask, invariant = pad_observations(obs, max_rows=3)
    assert variant.shape == (2, 3, VARIANT_WIDTH)
    assert mask.tolist() == [[True, True, False], [False, False, False]]
    with pytest.raises(DimensionError):
        pad_observations(obs, max_rows=1)
    avail = pad_avail(np.array([[True, False, True]]), 5)
    assert avail.tolist() == [[True, False, True, False, False]]


def test_check_arena_rejects_too_many_enemies():
    net = AgentNet(AgentNetSpec(d_k=4, d_h=4, action_slots=3))
    net.check_arena(9)
    with pytest.raises(DimensionError, match="action_slots"):
        net.check_arena(10)


def test_select_action_greedy_ties_and_mask():
    rng = np.random.default_rng(0)
    q = np.array([5.0, 1.0, 3.0, 3.0])
    assert select_action(q, np.array([False, True, True, True]), 0.0, rng) == 2
    assert select_action(q, np.array([True, True, True, True]), 0.0, rng) == 0
    with pytest.raises(ContractError):
        select_action(q, np.zeros(4, dtype=bool), 0.0, rng)


def test_select_action_explores_uniformly_over_available_actions():
    rng = np.random.default_rng(1)
    mask = np.array([False, True, False, True, True, False])
    q = np.array([0.0, 9.0, 0.0, -1.0, 2.0, 0.0])
    draws = 100_000
    counts = np.bincount([select_action(q, mask, 1.0, rng) for _ in range(draws)], minlength=6)
    assert counts[~mask].sum() == 0
    assert np.allclose(counts[mask] / draws, 1.0 / 3.0, atol=0.01)


def test_greedy_actions_is_masked_argmax():
    q = np.array([[[1.0, 9.0, 2.0], [0.0, 0.0, 0.0]]])
    mask = np.array([[[True, False, True], [False, True, True]]])
    assert greedy_actions(q, mask).tolist() == [[2, 1]]


def test_agent_net_gradients_match_finite_differences():
    net, params = small_net()
    rng = np.random.default_rng(9)
    own = rng.normal(size=(2, OWN_WIDTH))
    variant = rng.normal(size=(2, 3, VARIANT_WIDTH))
    mask = np.array([[True, True, False], [True, False, False]])
    invariant = rng.normal(size=(2, INVARIANT_WIDTH))
    weights = rng.normal(size=(2, SPEC.n_actions))
    inputs = {name: value for name, value in params.items()}

    def fn(t):
        step = net.forward(own, variant, mask, invariant, net.initial_hidden((2,)), t)
        return nx.reduce_sum(nx.mul(step.q_values, weights))

    assert nx.gradcheck(fn, inputs) < 1e-4
