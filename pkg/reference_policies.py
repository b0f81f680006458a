"""
Scripted policies: KL anchors during training and opponents during rollouts.

Every scripted choice is deterministic; distributions are one-hot over the
legal_actions order, which keeps D_KL(ref || pi) finite for a softmax pi.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from errors import NoLegalAction, ScenarioMismatch
from games import Action, GameState, GraphGame, Team, attack, move
from graph_world import UNREACHABLE
from models import Scenario

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReferenceDistribution:
    """Probabilities aligned with legal_actions(state, agent)."""
    actions: tuple
    probs: np.ndarray

    @classmethod
    def one_hot(cls, actions: Sequence[Action], chosen: Action) -> "ReferenceDistribution":
        actions = tuple(actions)
        probs = np.zeros(len(actions))
        probs[actions.index(chosen)] = 1.0
        return cls(actions=actions, probs=probs)

    @property
    def index(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def action(self) -> Action:
        return self.actions[self.index]


def _hop(game: GraphGame, u: int, v: int) -> float:
    h = game.distances.hops[u, v]
    return float("inf") if h == UNREACHABLE else float(h)


def _step_toward(game: GraphGame, here: int, goal: int) -> Action:
    # Neighbors are ascending, so min() keeps the lowest node id on ties.
    options = game.graph.neighbors(here)
    if not options:
        return move(here)
    return move(min(options, key=lambda v: _hop(game, v, goal)))


def pursuit_reference(game: GraphGame, state: GameState, agent: int) -> ReferenceDistribution:
    """Shortest-path chase: the neighbor closest to the evader."""
    if game.scenario != Scenario.PURSUIT or game.team_of(agent) is not Team.OURS:
        raise ScenarioMismatch(f"agent {agent} is not a pursuer")
    legal = game.legal_actions(state, agent)
    here = state.positions[agent]
    if not game.graph.neighbors(here):
        raise NoLegalAction(f"pursuer {agent} at isolated node {here}")
    chosen = _step_toward(game, here, state.positions[game.evader()])
    return ReferenceDistribution.one_hot(legal, chosen)


def confrontation_reference(game: GraphGame, state: GameState, agent: int) -> ReferenceDistribution:
    """Attack the closest living enemy within sensing range, otherwise approach the nearest one."""
    if game.scenario != Scenario.CONFRONTATION:
        raise ScenarioMismatch("confrontation reference requested outside the confrontation scenario")
    legal = game.legal_actions(state, agent)
    if not state.alive[agent]:
        return ReferenceDistribution.one_hot(legal, legal[0])
    here = state.positions[agent]
    enemies = [j for j in game.opponents_of(agent) if state.alive[j]]
    if not enemies:
        raise NoLegalAction(f"agent {agent} has no living enemy; the episode should be over")

    # Ascending agent ids, so min() keeps the lowest id on ties.
    nearest = min(enemies, key=lambda j: _hop(game, here, state.positions[j]))
    distance = _hop(game, here, state.positions[nearest])
    if distance <= game.cfg.sensing_range:
        candidate = attack(nearest)
        if candidate in legal:
            return ReferenceDistribution.one_hot(legal, candidate)
    chosen = _step_toward(game, here, state.positions[nearest])
    return ReferenceDistribution.one_hot(legal, chosen)


def evader_heuristic(game: GraphGame, state: GameState) -> Action:
    """Move to the neighbor maximizing the minimum distance to all pursuers."""
    evader = game.evader()
    here = state.positions[evader]
    options = game.graph.neighbors(here)
    if not options:
        return move(here)
    pursuers = [state.positions[p] for p in game.team_agents(Team.OURS)]

    def safety(v: int) -> float:
        return min(_hop(game, v, p) for p in pursuers)

    best = max(safety(v) for v in options)
    return move(next(v for v in options if safety(v) == best))


def reference_distribution(game: GraphGame, state: GameState, agent: int) -> ReferenceDistribution:
    if game.scenario == Scenario.PURSUIT:
        if game.team_of(agent) is Team.OPPONENT:
            legal = game.legal_actions(state, agent)
            return ReferenceDistribution.one_hot(legal, evader_heuristic(game, state))
        return pursuit_reference(game, state, agent)
    return confrontation_reference(game, state, agent)


def scripted_team_actions(game: GraphGame, state: GameState, team: Team) -> List[Action]:
    """Joint scripted action for a team; dead agents NoOp."""
    actions = []
    for agent in game.team_agents(team):
        if not state.alive[agent]:
            actions.append(game.noop(state, agent))
        else:
            actions.append(reference_distribution(game, state, agent).action)
    return actions


def random_team_actions(game: GraphGame, state: GameState, team: Team, rng: np.random.Generator) -> List[Action]:
    """Uniform over each agent's legal actions."""
    actions = []
    for agent in game.team_agents(team):
        legal = game.legal_actions(state, agent)
        actions.append(legal[int(rng.integers(len(legal)))])
    return actions
