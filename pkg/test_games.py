import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from errors import IllegalAction, PlacementImpossible, ScenarioMismatch, SteppingTerminalState, UnknownAgent
from games import (Action, EpisodeLog, GameState, GraphGame, Team, Winner, attack, damage_potential, move, replay)
from graph_world import Graph, all_pairs_shortest_paths
from models import Scenario, ScenarioConfig
from reference_policies import random_team_actions


def path_graph(n):
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def pursuit_game(graph, team_size=2, **kw):
    return GraphGame(ScenarioConfig(scenario=Scenario.PURSUIT, team_size=team_size, **kw), graph)


def confrontation_game(graph, team_size=3, **kw):
    return GraphGame(ScenarioConfig(scenario=Scenario.CONFRONTATION, team_size=team_size, **kw), graph)


def state(positions, hp=None, alive=None, step=0):
    n = len(positions)
    hp = hp if hp is not None else [3] * n
    alive = alive if alive is not None else [h > 0 for h in hp]
    return GameState(tuple(positions), tuple(hp), tuple(alive), step)


def grid(side):
    edges = []
    for r in range(side):
        for c in range(side):
            v = r * side + c
            if c + 1 < side:
                edges.append((v, v + 1))
            if r + 1 < side:
                edges.append((v, v + side))
    return Graph.from_edges(side * side, edges)


def test_reset_is_deterministic():
    game = pursuit_game(grid(4))
    assert game.reset(7) == game.reset(7)


def test_pursuit_reset_places_three_agents_apart():
    game = pursuit_game(grid(4))
    for seed in range(50):
        s = game.reset(seed)
        assert len(s.positions) == 3 and all(s.alive)
        assert len(set(s.positions)) == 3
        for p in s.positions[:2]:
            assert game.distances[p, s.positions[2]] > 1


def test_placement_impossible_on_tiny_map():
    game = confrontation_game(path_graph(2))
    with pytest.raises(PlacementImpossible):
        game.reset(0)


def test_pursuit_legal_actions_are_neighbor_moves():
    g = Graph.from_edges(5, [(0, 1), (0, 2), (0, 3), (3, 4)])
    game = pursuit_game(g, team_size=1)
    assert game.legal_actions(state([0, 4]), 0) == [move(1), move(2), move(3)]


def test_confrontation_attack_within_range():
    game = confrontation_game(path_graph(5), team_size=1, attack_range=2)
    s = state([0, 2])
    assert game.legal_actions(s, 0) == [move(1), attack(1)]
    far = state([0, 3])
    assert game.legal_actions(far, 0) == [move(1)]


def test_dead_agent_only_noops():
    game = confrontation_game(path_graph(6), team_size=1)
    s = state([1, 4], hp=[0, 3])
    assert game.legal_actions(s, 0) == [move(1)]


def test_unknown_agent():
    game = pursuit_game(path_graph(5), team_size=1)
    with pytest.raises(UnknownAgent):
        game.legal_actions(state([0, 4]), 5)


def test_capture_reward():
    game = pursuit_game(path_graph(6), team_size=1)
    result = game.step(state([0, 3]), [move(1)], [move(4)])
    assert not result.terminal
    result = game.step(state([1, 4]), [move(2)], [move(3)])
    assert result.terminal and result.reward == 30.0
    assert result.state.winner is Winner.OURS


def test_swap_through_is_allowed_but_captures():
    game = pursuit_game(path_graph(4), team_size=1)
    result = game.step(state([1, 2]), [move(2)], [move(1)])
    assert result.state.positions == (2, 1)
    assert result.terminal


def test_last_kill_pays_kill_and_all_kill():
    game = confrontation_game(path_graph(8), team_size=3, attack_range=2)
    s = state([0, 6, 7, 2, 5, 5], hp=[3, 3, 3, 1, 0, 0])
    ours = [attack(3), move(5), move(6)]
    theirs = [attack(0), move(5), move(5)]
    result = game.step(s, ours, theirs)
    assert result.reward == 23.0
    assert result.state.winner is Winner.OURS
    assert result.state.hp[0] == 2


def test_mutual_wipe_is_a_draw():
    game = confrontation_game(path_graph(4), team_size=1)
    s = state([0, 2], hp=[1, 1])
    result = game.step(s, [attack(1)], [attack(0)])
    assert result.terminal
    assert result.state.winner is Winner.DRAW
    assert result.reward == 0.0


def test_dead_this_step_still_deals_damage():
    game = confrontation_game(path_graph(5), team_size=1)
    s = state([0, 1], hp=[3, 1])
    result = game.step(s, [attack(1)], [attack(0)])
    assert result.state.hp == (2, 0)
    assert result.state.alive == (True, False)


def test_timeout_after_max_steps():
    game = confrontation_game(path_graph(9), team_size=1, max_steps=5)
    s = state([0, 8], step=4)
    result = game.step(s, [move(1)], [move(7)])
    assert result.terminal and result.reward == 0.0
    assert result.state.winner is Winner.TIMEOUT
    with pytest.raises(SteppingTerminalState):
        game.step(result.state, [move(2)], [move(6)])


def test_illegal_action_rejected():
    game = pursuit_game(path_graph(6), team_size=1)
    with pytest.raises(IllegalAction):
        game.step(state([0, 4]), [move(2)], [move(5)])
    with pytest.raises(IllegalAction):
        game.step(state([0, 4]), [move(1)], [])


def test_damage_potential_path():
    g = path_graph(5)
    cfg = ScenarioConfig(scenario=Scenario.CONFRONTATION, team_size=1, attack_range=2)
    dmg = damage_potential(g, all_pairs_shortest_paths(g), cfg)
    assert dmg[0, 0] == 1.0
    assert dmg[0, 2] == 1.0
    assert dmg[0, 3] == 0.0
    assert_array_equal(dmg.dmg, dmg.dmg.T)


def test_damage_potential_disconnected():
    g = Graph.from_edges(4, [(0, 1)])
    cfg = ScenarioConfig(scenario=Scenario.CONFRONTATION, team_size=1)
    dmg = damage_potential(g, all_pairs_shortest_paths(g), cfg)
    assert dmg[0, 3] == 0.0


def test_featurize_pursuit_path():
    game = pursuit_game(path_graph(4), team_size=1)
    features = game.featurize(state([0, 3])).values
    assert features.shape == (4, 2)
    assert_allclose(features[:, 0], [0, 1 / 3, 2 / 3, 1])
    assert_allclose(features[:, 1], [1, 2 / 3, 1 / 3, 0])


def test_featurize_confrontation_columns():
    game = confrontation_game(path_graph(5), team_size=1)
    features = game.featurize(state([0, 4], hp=[3, 0]))
    values = features.values
    assert values.shape == (5, 8)
    assert values[0, 0] == 0.0
    assert_array_equal(values[:, 2], 1.0)
    assert_array_equal(values[:, 3], 1.0)
    assert_array_equal(values[:, 4], 1.0)     # dead agent distance
    assert_array_equal(values[:, 5], 0.0)     # dead agent damage
    assert_array_equal(values[:, 7], 0.0)     # dead agent alive flag
    assert features.layout[4] == (1, "distance")


def test_featurize_perspective_puts_own_team_first():
    game = confrontation_game(path_graph(5), team_size=1)
    s = state([0, 4])
    ours = game.featurize(s, Team.OURS).values
    theirs = game.featurize(s, Team.OPPONENT).values
    assert_array_equal(ours[:, :4], theirs[:, 4:])
    assert_array_equal(ours[:, 4:], theirs[:, :4])


def test_evader_only_in_pursuit():
    game = confrontation_game(path_graph(8))
    with pytest.raises(ScenarioMismatch):
        game.evader()


def _random_episode(game, seed):
    rng = np.random.default_rng(seed)
    s = game.reset(seed)
    log = EpisodeLog(game.map_digest, game.cfg, seed)
    states = [s]
    while not s.terminal:
        ours = random_team_actions(game, s, Team.OURS, rng)
        theirs = random_team_actions(game, s, Team.OPPONENT, rng)
        result = game.step(s, ours, theirs)
        log.record(s.step, ours, theirs, result.reward)
        s = result.state
        states.append(s)
    return log, states


@pytest.mark.parametrize("scenario", [Scenario.PURSUIT, Scenario.CONFRONTATION])
def test_fuzzed_episodes_keep_invariants(scenario):
    g = grid(4)
    game = pursuit_game(g) if scenario == Scenario.PURSUIT else confrontation_game(g, max_steps=40)
    for seed in range(30):
        log, states = _random_episode(game, seed)
        assert states[-1].terminal
        deaths = [0] * game.agent_count
        for before, after in zip(states, states[1:]):
            assert after.step == before.step + 1 <= game.cfg.max_steps
            for k in range(game.agent_count):
                assert after.hp[k] >= 0
                assert after.alive[k] == (after.hp[k] > 0)
                deaths[k] += before.alive[k] and not after.alive[k]
                assert not (after.alive[k] and not before.alive[k])
            values = game.featurize(after).values
            assert values.min() >= 0.0 and values.max() <= 1.0
        assert max(deaths) <= 1


def test_episode_log_replays_identically():
    game = confrontation_game(grid(4), max_steps=30)
    log, states = _random_episode(game, 11)
    restored = EpisodeLog.loads(log.dumps())
    assert restored.seed == 11
    assert restored.steps == log.steps
    assert replay(game, restored) == states


def test_action_text_round_trip():
    assert str(move(12)) == "M12"
    assert Action.parse("A4") == attack(4)
    with pytest.raises(IllegalAction):
        Action.parse("X3")
