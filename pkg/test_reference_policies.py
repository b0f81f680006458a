import numpy as np
import pytest

from errors import ScenarioMismatch
from games import GameState, GraphGame, Team, attack, move
from graph_world import Graph
from models import Scenario, ScenarioConfig
from reference_policies import (confrontation_reference, evader_heuristic, pursuit_reference, random_team_actions,
                                reference_distribution, scripted_team_actions)


def path_graph(n):
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def game_on(graph, scenario, team_size=1, **kw):
    return GraphGame(ScenarioConfig(scenario=scenario, team_size=team_size, **kw), graph)


def state(positions, hp=None):
    hp = hp if hp is not None else [3] * len(positions)
    return GameState(tuple(positions), tuple(hp), tuple(h > 0 for h in hp))


def test_pursuer_steps_along_shortest_path():
    game = game_on(path_graph(4), Scenario.PURSUIT)
    dist = pursuit_reference(game, state([0, 3]), 0)
    assert dist.action == move(1)
    assert dist.probs.tolist() == [1.0]


def test_pursuer_tie_goes_to_lowest_node():
    g = Graph.from_edges(8, [(0, 2), (0, 5), (2, 7), (5, 7)])
    game = game_on(g, Scenario.PURSUIT)
    dist = pursuit_reference(game, state([0, 7]), 0)
    assert dist.action == move(2)
    assert dist.probs.tolist() == [1.0, 0.0]


def test_pursuit_reference_rejects_the_evader():
    game = game_on(path_graph(4), Scenario.PURSUIT)
    with pytest.raises(ScenarioMismatch):
        pursuit_reference(game, state([0, 3]), 1)


def test_confrontation_attacks_enemy_two_hops_away():
    game = game_on(path_graph(7), Scenario.CONFRONTATION)
    dist = confrontation_reference(game, state([0, 2]), 0)
    assert dist.action == attack(1)


def test_confrontation_approaches_nearest_enemy_out_of_range():
    game = game_on(path_graph(10), Scenario.CONFRONTATION, team_size=2)
    s = state([0, 9, 4, 3])
    assert confrontation_reference(game, s, 0).action == move(1)


def test_confrontation_tie_attacks_lowest_agent_id():
    game = game_on(path_graph(6), Scenario.CONFRONTATION, team_size=2)
    s = state([1, 5, 2, 0])
    assert confrontation_reference(game, s, 0).action == attack(2)


def test_confrontation_ignores_dead_enemies():
    game = game_on(path_graph(10), Scenario.CONFRONTATION, team_size=2)
    s = state([0, 9, 1, 5], hp=[3, 3, 0, 3])
    assert confrontation_reference(game, s, 0).action == move(1)


def test_confrontation_reference_outside_scenario():
    game = game_on(path_graph(4), Scenario.PURSUIT)
    with pytest.raises(ScenarioMismatch):
        confrontation_reference(game, state([0, 3]), 0)


def test_evader_runs_away():
    game = game_on(path_graph(4), Scenario.PURSUIT)
    assert evader_heuristic(game, state([0, 2])) == move(3)


def test_evader_tie_goes_to_lowest_node():
    g = Graph.from_edges(6, [(0, 1), (0, 4), (1, 5), (4, 5)])
    game = game_on(g, Scenario.PURSUIT)
    assert evader_heuristic(game, state([5, 0])) == move(1)


def test_evader_reference_is_one_hot_over_legal_moves():
    game = game_on(path_graph(5), Scenario.PURSUIT)
    dist = reference_distribution(game, state([0, 2]), 1)
    assert dist.actions == (move(1), move(3))
    assert dist.action == move(3)


def test_scripted_team_noops_dead_agents():
    game = game_on(path_graph(8), Scenario.CONFRONTATION, team_size=2)
    s = state([0, 7, 2, 5], hp=[0, 3, 3, 3])
    actions = scripted_team_actions(game, s, Team.OURS)
    assert actions[0] == move(0)
    assert actions[1] == attack(3)


def test_reference_actions_always_legal():
    rng = np.random.default_rng(0)
    g = Graph.from_edges(9, [(r * 3 + c, r * 3 + c + 1) for r in range(3) for c in range(2)]
                         + [(r * 3 + c, r * 3 + c + 3) for r in range(2) for c in range(3)])
    for scenario, size in [(Scenario.PURSUIT, 2), (Scenario.CONFRONTATION, 3)]:
        game = game_on(g, scenario, team_size=size, max_steps=30)
        for seed in range(20):
            s = game.reset(seed)
            while not s.terminal:
                for team in Team:
                    for agent, action in zip(game.team_agents(team), scripted_team_actions(game, s, team)):
                        assert action in game.legal_actions(s, agent)
                        dist = reference_distribution(game, s, agent) if s.alive[agent] else None
                        if dist is not None:
                            assert dist.probs.sum() == 1.0
                            assert list(dist.actions) == game.legal_actions(s, agent)
                s = game.step(s, random_team_actions(game, s, Team.OURS, rng),
                              random_team_actions(game, s, Team.OPPONENT, rng)).state
