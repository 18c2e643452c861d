"""Tests for the combat arena."""

import json

import numpy as np
import pytest

from raca.config.manager import ConfigManager
from raca.core.arena import (
    INVARIANT_WIDTH,
    MOVE_E,
    MOVE_N,
    MOVE_W,
    N_BASE_ACTIONS,
    NO_OP,
    OWN_WIDTH,
    STATE_UNIT_WIDTH,
    STOP,
    VARIANT_WIDTH,
    Arena,
    ArenaConfig,
    SpawnRule,
    UnitSpec,
    scripted_opponent,
)
from raca.utils.errors import ConfigError, ContractError


def make_config(allies, enemies, ally_positions, enemy_positions, **kwargs) -> ArenaConfig:
    return ArenaConfig(
        allies=tuple(allies),
        enemies=tuple(enemies),
        spawn=SpawnRule(
            mode="fixed",
            ally_positions=tuple(ally_positions),
            enemy_positions=tuple(enemy_positions),
        ),
        **kwargs,
    )


def rangers(n, **overrides):
    return [UnitSpec.of_type("ranger", **overrides)] * n


def test_presets_load_and_validate():
    manager = ConfigManager()
    names = manager.list_scenarios()
    assert "3v3_rangers" in names and "4v4_rangers" in names
    for name in names:
        config = manager.resolve_arena(name)
        assert config.name == name
        state, observations, avail = Arena(config).reset(0)
        assert state.shape == (config.state_dim,)
        assert len(observations) == config.n_allies
        assert avail.shape == (config.n_allies, config.n_actions)


def test_invalid_config_names_field():
    with pytest.raises(ConfigError) as info:
        make_config(rangers(2), rangers(1), [(0, 0)], [(5, 5)]).validate()
    assert info.value.field == "spawn.ally_positions"
    with pytest.raises(ConfigError) as info:
        make_config(rangers(1), rangers(1), [(0, 0)], [(5, 5)], max_steps=0).validate()
    assert info.value.field == "max_steps"
    with pytest.raises(ConfigError):
        ArenaConfig.from_dict({"allies": [{"type": "dragon"}], "enemies": [{"type": "ranger"}]})


def test_from_dict_expands_counts_and_round_trips():
    data = {
        "name": "tiny",
        "width": 10,
        "height": 6,
        "allies": [{"type": "ranger", "count": 2}, {"type": "bruiser"}],
        "enemies": [{"type": "ranger", "count": 3}],
        "spawn": {"mode": "zones", "ally_zone": [0, 0, 2, 5], "enemy_zone": [7, 0, 9, 5]},
    }
    config = ArenaConfig.from_dict(data)
    assert [u.type_id for u in config.allies] == ["ranger", "ranger", "bruiser"]
    assert config.n_actions == N_BASE_ACTIONS + 3
    again = ArenaConfig.from_dict(json.loads(json.dumps(config.to_dict())))
    assert again == config


def test_reset_is_deterministic_per_seed():
    config = ConfigManager().resolve_arena("3v3_rangers_rnd")
    a, b = Arena(config), Arena(config)
    a.reset(11)
    b.reset(11)
    assert a.positions == b.positions
    positions = a.positions
    assert len(set(positions)) == len(positions)
    x0, y0, x1, y1 = config.spawn.ally_zone
    assert all(x0 <= x <= x1 and y0 <= y <= y1 for x, y in positions[: config.n_allies])
    spawns = set()
    for seed in range(20):
        a.reset(seed)
        spawns.add(tuple(a.positions))
    assert len(spawns) > 1


def test_observation_layout():
    config = make_config(rangers(2), rangers(1), [(0, 0), (0, 3)], [(4, 0)], width=10, height=10)
    arena = Arena(config)
    _, observations, _ = arena.reset(0)
    obs = observations[0]
    assert obs.own.shape == (OWN_WIDTH,)
    assert np.allclose(obs.own, [1.0, 0.0, 1.0, 0.0, 0.0])
    assert obs.variant.shape == (2, VARIANT_WIDTH)
    teammate, enemy = obs.variant
    assert teammate[0] == 1.0 and enemy[0] == 0.0
    assert teammate[1] == pytest.approx(3.0 / 9.0)
    assert enemy[2] == pytest.approx(4.0 / 9.0)
    assert enemy[3] == pytest.approx(0.0)
    assert obs.invariant.shape == (INVARIANT_WIDTH,)
    # At (0, 0): north and east are free, south and west leave the grid
    assert np.array_equal(obs.invariant[:4], [1.0, 0.0, 1.0, 0.0])


def test_visibility_is_a_closed_ball():
    config = make_config(rangers(2), rangers(1), [(0, 0), (9, 0)], [(0, 10)], width=20, height=20)
    arena = Arena(config)
    arena.reset(0)
    assert arena.visibility(0, 1)
    assert not arena.visibility(0, 2)
    assert arena.ally_visibility().tolist() == [[False, True], [True, False]]


def test_attack_mask_follows_range():
    config = make_config(rangers(1), rangers(2), [(0, 0)], [(6, 0), (7, 0)], width=12, height=4)
    arena = Arena(config)
    _, _, avail = arena.reset(0)
    assert avail[0, N_BASE_ACTIONS + 0]
    assert not avail[0, N_BASE_ACTIONS + 1]
    assert not avail[0, NO_OP]
    assert avail[0, STOP:N_BASE_ACTIONS].all()


def test_unavailable_action_names_agent_and_action():
    config = make_config(rangers(1), rangers(1), [(0, 0)], [(10, 0)], width=12, height=4)
    arena = Arena(config)
    arena.reset(0)
    with pytest.raises(ContractError, match="Agent 0 chose unavailable action 6"):
        arena.step([N_BASE_ACTIONS])


def test_shield_absorbs_damage_first():
    config = make_config(
        rangers(1),
        [UnitSpec.of_type("bruiser")],
        [(0, 0)],
        [(5, 0)],
        width=12,
        height=4,
    )
    arena = Arena(config)
    arena.reset(0)
    result = arena.step([N_BASE_ACTIONS])
    bruiser = arena.enemies[0]
    assert bruiser.shield == pytest.approx(44.0)
    assert bruiser.health == pytest.approx(100.0)
    assert result.info["damage"] == pytest.approx(6.0)
    assert result.reward == pytest.approx(6.0 / config.reward_scale)


def test_blocked_move_becomes_stop():
    config = make_config(rangers(2), rangers(1), [(0, 0), (0, 1)], [(15, 3)], width=16, height=4)
    arena = Arena(config)
    arena.reset(0)
    arena.step([MOVE_N, STOP])
    assert (arena.allies[0].x, arena.allies[0].y) == (0, 0)


def test_dead_agents_only_no_op_and_observe_zeros():
    config = make_config(
        [UnitSpec.of_type("ranger"), UnitSpec.of_type("ranger", initial_health_frac=0.0)],
        rangers(1),
        [(0, 0), (0, 2)],
        [(15, 3)],
        width=16,
        height=4,
    )
    arena = Arena(config)
    state, observations, avail = arena.reset(0)
    assert avail[1].tolist() == [True] + [False] * (config.n_actions - 1)
    assert np.array_equal(observations[1].own, np.zeros(OWN_WIDTH))
    assert observations[1].n_entities == 0
    assert np.array_equal(state[STATE_UNIT_WIDTH : 2 * STATE_UNIT_WIDTH], np.zeros(STATE_UNIT_WIDTH))
    assert avail.any(axis=1).all()


def test_enemies_starting_dead_win_immediately():
    config = make_config(
        rangers(2),
        rangers(2, initial_health_frac=0.0),
        [(0, 0), (0, 2)],
        [(9, 0), (9, 2)],
        width=12,
        height=4,
    )
    arena = Arena(config)
    arena.reset(0)
    result = arena.step([STOP, STOP])
    assert result.terminated and result.won and not result.truncated
    assert result.reward == pytest.approx(200.0 / config.reward_scale)


def test_kill_and_win_reward():
    weak = UnitSpec.of_type("ranger", max_health=6.0)
    config = make_config(rangers(1), [weak], [(0, 0)], [(3, 0)], width=8, height=4)
    arena = Arena(config)
    arena.reset(0)
    result = arena.step([N_BASE_ACTIONS])
    assert result.won and result.terminated
    assert result.info["kills"] == 1
    assert result.reward == pytest.approx((6.0 + 10.0 + 200.0) / config.reward_scale)
    assert result.reward == pytest.approx(1.0)


def test_reward_scale_counts_enemy_health_not_shields():
    bruiser = UnitSpec.of_type("bruiser")
    enemies = [bruiser, UnitSpec.of_type("ranger")]
    config = make_config(rangers(1), enemies, [(0, 0)], [(5, 0), (6, 0)], width=8, height=4)
    assert config.reward_scale == pytest.approx(100.0 + 45.0 + 10.0 * 2 + 200.0)


def test_deaths_applied_after_enemy_phase():
    weak = UnitSpec.of_type("ranger", max_health=6.0)
    config = make_config(rangers(1, max_health=6.0), [weak], [(0, 0)], [(3, 0)], width=8, height=4)
    arena = Arena(config)
    arena.reset(0)
    result = arena.step([N_BASE_ACTIONS])
    # Both shots land; the enemy fired before deaths were resolved
    assert not arena.allies[0].alive and not arena.enemies[0].alive
    assert result.won and result.terminated


def test_max_steps_truncates():
    config = make_config(rangers(1), rangers(1), [(0, 0)], [(15, 3)], width=16, height=4, max_steps=2)
    arena = Arena(config)
    arena.reset(0)
    first = arena.step([STOP])
    assert not first.terminated
    second = arena.step([STOP])
    assert second.terminated and second.truncated and not second.won
    with pytest.raises(ContractError):
        arena.step([STOP])


def test_scripted_opponent_attacks_nearest_then_chases():
    config = make_config(rangers(2), rangers(1), [(5, 0), (8, 0)], [(0, 0)], width=12, height=4)
    arena = Arena(config)
    arena.reset(0)
    assert scripted_opponent(arena.enemies, arena.allies, 12, 4) == [N_BASE_ACTIONS + 0]
    arena.allies[0].x = 9
    arena.allies[1].x = 8
    # Nothing in range, nearest ally is within sight: step east toward it
    assert scripted_opponent(arena.enemies, arena.allies, 12, 4) == [MOVE_E]
    arena.allies[0].x, arena.allies[1].x = 11, 10
    assert scripted_opponent(arena.enemies, arena.allies, 12, 4) == [STOP]


def test_medic_heals_slot_ally():
    medic = UnitSpec.of_type("medic")
    config = make_config(
        [UnitSpec.of_type("ranger"), medic],
        rangers(2),
        [(0, 0), (0, 2)],
        [(15, 3), (15, 1)],
        width=16,
        height=4,
    )
    arena = Arena(config)
    _, _, avail = arena.reset(0)
    arena.allies[0].health = 20.0
    assert avail[1, N_BASE_ACTIONS + 0]
    assert not avail[1, N_BASE_ACTIONS + 1]
    arena.step([STOP, N_BASE_ACTIONS + 0])
    assert arena.allies[0].health == pytest.approx(29.0)


def test_mirror_symmetry():
    config = ConfigManager().resolve_arena("3v3_rangers")
    left, right = Arena(config), Arena(config.mirrored())
    _, obs_l, _ = left.reset(0)
    _, obs_r, _ = right.reset(0)
    swap = {MOVE_E: MOVE_W, MOVE_W: MOVE_E}
    for _ in range(5):
        actions = [MOVE_E, STOP, MOVE_E]
        res_l = left.step(actions)
        res_r = right.step([swap.get(a, a) for a in actions])
        assert res_l.reward == pytest.approx(res_r.reward)
        for a, b in zip(res_l.observations, res_r.observations):
            assert np.allclose(a.own, b.own)
            assert np.allclose(a.variant[:, [0, 1, 3, 4, 5]], b.variant[:, [0, 1, 3, 4, 5]])
            assert np.allclose(a.variant[:, 2], -b.variant[:, 2])


def test_trace_is_line_delimited_json(tmp_path):
    config = ConfigManager().resolve_arena("1v1_duel")
    trace = tmp_path / "trace.jsonl"
    arena = Arena(config, trace_path=trace)
    arena.reset(3)
    arena.step([STOP])
    arena.close()
    events = [json.loads(line)["event"] for line in trace.read_text().splitlines()]
    assert events == ["reset", "step"]
