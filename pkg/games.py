"""
Two-team zero-sum Markov games on a graph: pursuit and confrontation.

Agent numbering: our team is 0..m-1, the opponent team follows (one evader
in pursuit, m agents in confrontation). All rewards are reported for our
team; the opponent's reward is the negation.

Resolution order inside one step:
  1. every Move is applied simultaneously (no collision rule, swaps allowed)
  2. pursuit: capture if any pursuer is within one hop of the evader
  3. confrontation: every Attack lands with the damage potential between
     the post-move nodes; agents killed this step still deal their damage
  4. the step counter advances; the limit ends the episode as a timeout
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from errors import (IllegalAction, PlacementImpossible, ScenarioMismatch,
                    SteppingTerminalState, UnknownAgent)
from graph_world import UNREACHABLE, DistanceMatrix, Graph, all_pairs_shortest_paths, map_digest
from models import Scenario, ScenarioConfig

logger = logging.getLogger(__name__)


class Team(str, Enum):
    OURS = "ours"
    OPPONENT = "opponent"

    @property
    def other(self) -> "Team":
        return Team.OPPONENT if self is Team.OURS else Team.OURS


class Winner(str, Enum):
    OURS = "ours"
    OPPONENT = "opponent"
    TIMEOUT = "timeout"
    DRAW = "draw"
    NONE = "none"


class ActionKind(str, Enum):
    MOVE = "M"
    ATTACK = "A"


@dataclass(frozen=True)
class Action:
    """Move to a node, or attack an agent. NoOp is a Move to the actor's own node."""
    kind: ActionKind
    target: int

    def __str__(self) -> str:
        return f"{self.kind.value}{self.target}"

    @classmethod
    def parse(cls, text: str) -> "Action":
        text = text.strip()
        try:
            return cls(ActionKind(text[0]), int(text[1:]))
        except (ValueError, IndexError) as e:
            raise IllegalAction(f"cannot parse action '{text}'") from e

    @property
    def is_attack(self) -> bool:
        return self.kind is ActionKind.ATTACK


def move(node: int) -> Action:
    return Action(ActionKind.MOVE, node)


def attack(agent: int) -> Action:
    return Action(ActionKind.ATTACK, agent)


@dataclass(frozen=True)
class GameState:
    """Immutable snapshot of one episode."""
    positions: Tuple[int, ...]
    hp: Tuple[int, ...]
    alive: Tuple[bool, ...]
    step: int = 0
    terminal: bool = False
    winner: Winner = Winner.NONE


@dataclass(frozen=True)
class DamageMatrix:
    dmg: np.ndarray

    def __getitem__(self, index):
        return self.dmg[index]

    @property
    def max_damage(self) -> float:
        return float(self.dmg.max()) if self.dmg.size else 0.0


@dataclass(frozen=True)
class FeatureMatrix:
    """n×f matrix in [0,1]; layout[c] = (agent id, feature kind) of column c."""
    values: np.ndarray
    layout: Tuple[Tuple[int, str], ...] = field(default=())


class StepResult(NamedTuple):
    state: GameState
    reward: float
    terminal: bool


def damage_potential(g: Graph, d: DistanceMatrix, cfg: ScenarioConfig) -> DamageMatrix:
    """base_damage between nodes within attack range, 0 otherwise (including disconnected pairs)."""
    hops = d.hops
    in_range = (hops != UNREACHABLE) & (hops <= cfg.attack_range)
    dmg = np.where(in_range, float(cfg.base_damage), 0.0)
    dmg.flags.writeable = False
    return DamageMatrix(dmg=dmg)


class GraphGame:
    """Static rules of one scenario on one map; states are passed in and returned."""

    def __init__(self, cfg: ScenarioConfig, graph: Graph, distances: Optional[DistanceMatrix] = None):
        self.cfg = cfg
        self.graph = graph
        self.distances = distances if distances is not None else all_pairs_shortest_paths(graph)
        self.damage = damage_potential(graph, self.distances, cfg)
        self._normalized_distance = self.distances.normalized()
        self._max_damage = self.damage.max_damage or 1.0
        self.map_digest = map_digest(graph)

    @property
    def scenario(self) -> Scenario:
        return self.cfg.scenario

    @property
    def agent_count(self) -> int:
        return self.cfg.agent_count

    def team_of(self, agent: int) -> Team:
        self._check_agent(agent)
        return Team.OURS if agent < self.cfg.team_size else Team.OPPONENT

    def team_agents(self, team: Team) -> range:
        if team is Team.OURS:
            return range(0, self.cfg.team_size)
        return range(self.cfg.team_size, self.cfg.agent_count)

    def opponents_of(self, agent: int) -> range:
        return self.team_agents(self.team_of(agent).other)

    def evader(self) -> int:
        if self.scenario != Scenario.PURSUIT:
            raise ScenarioMismatch("only the pursuit scenario has an evader")
        return self.cfg.team_size

    def _check_agent(self, agent: int) -> None:
        if not 0 <= agent < self.cfg.agent_count:
            raise UnknownAgent(f"agent {agent} not in 0..{self.cfg.agent_count - 1}")

    def reset(self, seed: int) -> GameState:
        """Random distinct spawn nodes; deterministic for a fixed seed."""
        rng = np.random.default_rng(seed)
        n = self.graph.node_count
        total = self.cfg.agent_count
        if n < total:
            raise PlacementImpossible(f"{total} agents do not fit on {n} nodes")

        if self.scenario == Scenario.PURSUIT:
            positions = self._place_pursuit(rng)
        else:
            positions = [int(v) for v in rng.choice(n, size=total, replace=False)]

        hp = tuple([self.cfg.initial_hp] * total)
        return GameState(positions=tuple(positions), hp=hp, alive=tuple([True] * total))

    def _place_pursuit(self, rng: np.random.Generator) -> List[int]:
        # No stay action in pursuit, so every agent needs at least one neighbor.
        movable = [v for v in range(self.graph.node_count) if self.graph.degree(v) > 0]
        hops = self.distances.hops
        m = self.cfg.team_size
        for evader in rng.permutation(movable):
            pool = [v for v in movable
                    if v != evader and not (hops[v, evader] != UNREACHABLE and hops[v, evader] <= 1)]
            if len(pool) >= m:
                pursuers = rng.choice(pool, size=m, replace=False)
                return [int(p) for p in pursuers] + [int(evader)]
        raise PlacementImpossible("no spawn layout keeps every pursuer more than one hop from the evader")

    def noop(self, state: GameState, agent: int) -> Action:
        return move(state.positions[agent])

    def legal_actions(self, state: GameState, agent: int) -> List[Action]:
        """Moves ascending by node id, then attacks ascending by agent id."""
        self._check_agent(agent)
        if not state.alive[agent]:
            return [self.noop(state, agent)]
        here = state.positions[agent]
        actions = [move(v) for v in self.graph.neighbors(here)]
        if self.scenario == Scenario.CONFRONTATION:
            for j in self.opponents_of(agent):
                if state.alive[j] and self.damage[here, state.positions[j]] > 0:
                    actions.append(attack(j))
        if not actions:
            actions.append(self.noop(state, agent))
        return actions

    def step(self, state: GameState, ours: Sequence[Action], theirs: Sequence[Action]) -> StepResult:
        if state.terminal:
            raise SteppingTerminalState(f"episode already ended at step {state.step} ({state.winner.value})")
        if len(ours) != self.cfg.team_size or len(theirs) != self.cfg.opponent_count:
            raise IllegalAction(f"expected {self.cfg.team_size} + {self.cfg.opponent_count} actions, "
                                f"got {len(ours)} + {len(theirs)}")
        joint = list(ours) + list(theirs)
        for agent, action in enumerate(joint):
            if action not in self.legal_actions(state, agent):
                raise IllegalAction(f"agent {agent} cannot play {action} at node {state.positions[agent]}")

        positions = [a.target if a.kind is ActionKind.MOVE else p for a, p in zip(joint, state.positions)]
        hp = list(state.hp)
        alive = list(state.alive)
        reward = 0.0
        winner = Winner.NONE

        if self.scenario == Scenario.PURSUIT:
            hops = self.distances.hops
            evader = positions[self.evader()]
            for p in self.team_agents(Team.OURS):
                h = hops[positions[p], evader]
                if h != UNREACHABLE and h <= 1:
                    reward = self.cfg.r_capture
                    winner = Winner.OURS
                    break
        else:
            incoming = [0.0] * self.agent_count
            for agent, action in enumerate(joint):
                if action.is_attack and state.alive[agent]:
                    incoming[action.target] += self.damage[positions[agent], positions[action.target]]
            for agent in range(self.agent_count):
                if alive[agent] and incoming[agent] > 0:
                    hp[agent] = max(0, hp[agent] - int(incoming[agent]))
                    alive[agent] = hp[agent] > 0

            killed_theirs = sum(state.alive[j] and not alive[j] for j in self.team_agents(Team.OPPONENT))
            killed_ours = sum(state.alive[j] and not alive[j] for j in self.team_agents(Team.OURS))
            reward = self.cfg.r_kill * (killed_theirs - killed_ours)
            theirs_wiped = not any(alive[j] for j in self.team_agents(Team.OPPONENT))
            ours_wiped = not any(alive[j] for j in self.team_agents(Team.OURS))
            if theirs_wiped and ours_wiped:
                winner = Winner.DRAW
            elif theirs_wiped:
                reward += self.cfg.r_all_kill
                winner = Winner.OURS
            elif ours_wiped:
                reward -= self.cfg.r_all_kill
                winner = Winner.OPPONENT

        step = state.step + 1
        terminal = winner is not Winner.NONE
        if not terminal and step >= self.cfg.max_steps:
            terminal = True
            winner = Winner.TIMEOUT

        next_state = GameState(positions=tuple(positions), hp=tuple(hp), alive=tuple(alive),
                               step=step, terminal=terminal, winner=winner)
        return StepResult(next_state, float(reward), terminal)

    def featurize(self, state: GameState, perspective: Team = Team.OURS) -> FeatureMatrix:
        """Column block per agent, perspective team first: distance (+ damage, hp, alive)."""
        n = self.graph.node_count
        agents = list(self.team_agents(perspective)) + list(self.team_agents(perspective.other))
        confrontation = self.scenario == Scenario.CONFRONTATION
        per_agent = self.cfg.features_per_agent
        values = np.zeros((n, per_agent * len(agents)), dtype=np.float64)
        layout = []
        for block, agent in enumerate(agents):
            col = block * per_agent
            pos = state.positions[agent]
            living = state.alive[agent]
            values[:, col] = self._normalized_distance[pos] if living else 1.0
            layout.append((agent, "distance"))
            if confrontation:
                if living:
                    values[:, col + 1] = self.damage[pos] / self._max_damage
                values[:, col + 2] = state.hp[agent] / self.cfg.initial_hp
                values[:, col + 3] = 1.0 if living else 0.0
                layout.extend([(agent, "damage"), (agent, "hp"), (agent, "alive")])
        np.clip(values, 0.0, 1.0, out=values)
        return FeatureMatrix(values=values, layout=tuple(layout))

    def is_success(self, state: GameState) -> bool:
        return state.terminal and state.winner is Winner.OURS


@dataclass(frozen=True)
class LoggedStep:
    t: int
    ours: Tuple[Action, ...]
    theirs: Tuple[Action, ...]
    reward: float


@dataclass
class EpisodeLog:
    """Replayable record of one episode."""
    map_digest: str
    scenario: ScenarioConfig
    seed: int
    steps: List[LoggedStep] = field(default_factory=list)

    def record(self, t: int, ours: Sequence[Action], theirs: Sequence[Action], reward: float) -> None:
        self.steps.append(LoggedStep(t, tuple(ours), tuple(theirs), float(reward)))

    def dumps(self) -> str:
        lines = [f"episode map={self.map_digest} seed={self.seed} cfg={self.scenario.model_dump_json()}"]
        for s in self.steps:
            ours = ",".join(str(a) for a in s.ours)
            theirs = ",".join(str(a) for a in s.theirs)
            lines.append(f"t={s.t} ours={ours} theirs={theirs} r={s.reward!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "EpisodeLog":
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines or not lines[0].startswith("episode "):
            raise ValueError("episode log must start with an 'episode' header")
        head, _, cfg_json = lines[0].partition(" cfg=")
        fields = dict(token.split("=", 1) for token in head.split()[1:])
        log = cls(map_digest=fields["map"], scenario=ScenarioConfig.model_validate_json(cfg_json),
                  seed=int(fields["seed"]))
        for line in lines[1:]:
            parts = dict(token.split("=", 1) for token in line.split())
            log.record(
                int(parts["t"]),
                [Action.parse(a) for a in parts["ours"].split(",") if a],
                [Action.parse(a) for a in parts["theirs"].split(",") if a],
                float(parts["r"]),
            )
        return log


def replay(game: GraphGame, log: EpisodeLog) -> List[GameState]:
    """Re-execute a logged episode; returns every state from reset to the last step."""
    if log.map_digest != game.map_digest or log.scenario != game.cfg:
        raise ScenarioMismatch("episode log was recorded on a different map or scenario")
    state = game.reset(log.seed)
    states = [state]
    for s in log.steps:
        result = game.step(state, s.ours, s.theirs)
        if result.reward != s.reward:
            logger.warning(f"Replay reward mismatch at t={s.t}: logged {s.reward}, replayed {result.reward}")
        state = result.state
        states.append(state)
    return states
