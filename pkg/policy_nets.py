"""
Attention encoder, agent-centric decoder, pointer actor and VDN critics.

Conventions: row vectors, so a projection is x @ W. Parameter names are
prefixed by their owner: ``actor.*`` for the policy network and
``critic1.*`` / ``critic2.*`` for the twin critics, each with its own
encoder and decoder. Target networks are ParameterSets holding the same
critic names.

Batched forward passes work on an AgentBatch: B states of one game, one row
per alive agent of the perspective team, candidate actions padded to the
widest row and masked.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

import tensor_autodiff as ad
from errors import (EmptyBatch, EmptyCandidates, IncompatibleCheckpoint, NodeOutOfRange, NonFiniteValue,
                    ShapeMismatch)
from games import Action, GameState, GraphGame, Team
from models import CheckpointEntry, CheckpointHeader, NetworkConfig
from reference_policies import reference_distribution
from tensor_autodiff import Tape, Tensor

logger = logging.getLogger(__name__)

CRITICS = ("critic1", "critic2")
CHECKPOINT_MAGIC = b"ARACCKPT\n"

Params = Mapping[str, Union[Tensor, np.ndarray]]


def _encoder_shapes(cfg: NetworkConfig, prefix: str) -> List[Tuple[str, Tuple[int, ...], Optional[int]]]:
    d, f, hidden = cfg.d_model, cfg.feature_width, cfg.d_model * cfg.ff_multiplier
    shapes = [(f"{prefix}.enc.input.W", (f, d), f), (f"{prefix}.enc.input.b", (d,), f)]
    for layer in range(cfg.encoder_layers):
        base = f"{prefix}.enc.{layer}"
        shapes += [
            (f"{base}.W_Q", (d, d), d),
            (f"{base}.W_K", (d, d), d),
            (f"{base}.W_V", (d, d), d),
            (f"{base}.ln1.gain", (d,), None),
            (f"{base}.ln1.bias", (d,), None),
            (f"{base}.ff.W1", (d, hidden), d),
            (f"{base}.ff.b1", (hidden,), d),
            (f"{base}.ff.W2", (hidden, d), hidden),
            (f"{base}.ff.b2", (d,), hidden),
            (f"{base}.ln2.gain", (d,), None),
            (f"{base}.ln2.bias", (d,), None),
        ]
    shapes += [(f"{prefix}.dec.W_Q", (d, d), d), (f"{prefix}.dec.W_K", (d, d), d), (f"{prefix}.dec.W_V", (d, d), d)]
    return shapes


def parameter_shapes(cfg: NetworkConfig) -> List[Tuple[str, Tuple[int, ...], Optional[int]]]:
    """(name, shape, fan_in) in a fixed order; fan_in None marks layer-norm parameters."""
    d, hidden = cfg.d_model, cfg.critic_hidden
    shapes = _encoder_shapes(cfg, "actor")
    shapes += [("actor.ptr.W_q", (2 * d, d), 2 * d), ("actor.ptr.W_k", (d, d), d)]
    for critic in CRITICS:
        shapes += _encoder_shapes(cfg, critic)
        shapes += [
            (f"{critic}.mlp.W1a", (4 * d, hidden), 5 * d + 2),
            (f"{critic}.mlp.W1b", (d + 2, hidden), 5 * d + 2),
            (f"{critic}.mlp.b1", (hidden,), 5 * d + 2),
            (f"{critic}.mlp.W2", (hidden, 1), hidden),
            (f"{critic}.mlp.b2", (1,), hidden),
        ]
    return shapes


class ParameterSet:
    """Named float64 arrays; the networks read them, the trainer writes them."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self.arrays: Dict[str, np.ndarray] = {}
        for name, values in arrays.items():
            arr = np.array(values, dtype=np.float64)
            if not np.isfinite(arr).all():
                raise NonFiniteValue(f"parameter {name} has non-finite entries")
            self.arrays[name] = arr

    @classmethod
    def initialize(cls, cfg: NetworkConfig, rng: np.random.Generator) -> "ParameterSet":
        arrays = {}
        for name, shape, fan_in in parameter_shapes(cfg):
            if fan_in is None:
                arrays[name] = np.ones(shape) if name.endswith(".gain") else np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __len__(self) -> int:
        return len(self.arrays)

    def names(self) -> List[str]:
        return list(self.arrays)

    def items(self):
        return self.arrays.items()

    def subset(self, prefixes: Iterable[str]) -> "ParameterSet":
        prefixes = tuple(f"{p}." for p in prefixes)
        return ParameterSet({n: a for n, a in self.arrays.items() if n.startswith(prefixes)})

    def copy(self) -> "ParameterSet":
        return ParameterSet({n: a.copy() for n, a in self.arrays.items()})

    def update(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, values in arrays.items():
            if name not in self.arrays:
                raise KeyError(name)
            if np.shape(values) != self.arrays[name].shape:
                raise ShapeMismatch(f"{name}: {np.shape(values)} vs {self.arrays[name].shape}")
            self.arrays[name] = np.array(values, dtype=np.float64)

    def tensors(self, tape: Optional[Tape] = None, trainable: Optional[Iterable[str]] = None) -> Dict[str, Tensor]:
        """Leaves on the tape for names under the trainable prefixes (all when None); constants otherwise."""
        prefixes = None if trainable is None else tuple(f"{p}." for p in trainable)
        out = {}
        for name, arr in self.arrays.items():
            if tape is not None and (prefixes is None or name.startswith(prefixes)):
                out[name] = tape.watch(arr, name)
            else:
                out[name] = Tensor(arr)
        return out

    def max_abs_difference(self, other: "ParameterSet") -> float:
        common = [n for n in self.arrays if n in other.arrays]
        if not common:
            return 0.0
        return max(float(np.max(np.abs(self.arrays[n] - other.arrays[n]))) for n in common)

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


@dataclass
class AgentBatch:
    """Network inputs for B states of one game, seen from one team."""
    node_count: int
    features: np.ndarray            # B×n×f
    attention_mask: np.ndarray      # n×n, adjacency with a true diagonal
    neighbor_weights: np.ndarray    # n×n, row-normalized adjacency
    opponent_weights: np.ndarray    # B×n, mean over alive opponents' nodes
    row_sample: np.ndarray          # R
    row_agent: np.ndarray           # R
    row_node: np.ndarray            # R
    candidates: List[Tuple[Action, ...]]
    candidate_nodes: np.ndarray     # R×K, node whose embedding keys each candidate
    candidate_mask: np.ndarray      # R×K
    candidate_is_attack: np.ndarray  # R×K
    reference_index: Optional[np.ndarray] = None
    perspective: Team = Team.OURS
    team_start: int = 0

    @classmethod
    def build(cls, game: GraphGame, states: Sequence[GameState], perspective: Team = Team.OURS,
              with_reference: bool = False) -> "AgentBatch":
        if not states:
            raise EmptyBatch("cannot build an agent batch from zero states")
        n = game.graph.node_count
        adjacency = game.graph.adjacency()
        mask = adjacency | np.eye(n, dtype=bool)
        degree = adjacency.sum(axis=1, keepdims=True)
        neighbor_weights = np.divide(adjacency, degree, out=np.zeros((n, n)), where=degree > 0)

        team = list(game.team_agents(perspective))
        enemies = list(game.team_agents(perspective.other))
        features = np.stack([game.featurize(s, perspective).values for s in states])
        opponent_weights = np.zeros((len(states), n))
        rows, candidates, references, slot_nodes, slot_attack = [], [], [], [], []
        for b, state in enumerate(states):
            living = [j for j in enemies if state.alive[j]]
            for j in living:
                opponent_weights[b, state.positions[j]] += 1.0 / len(living)
            for agent in team:
                if not state.alive[agent]:
                    continue
                legal = tuple(game.legal_actions(state, agent))
                rows.append((b, agent, state.positions[agent]))
                candidates.append(legal)
                slot_nodes.extend(state.positions[a.target] if a.is_attack else a.target for a in legal)
                slot_attack.extend(a.is_attack for a in legal)
                if with_reference:
                    # terminal states never bootstrap, and may have no enemy left to reference
                    references.append(0 if state.terminal else reference_distribution(game, state, agent).index)

        width = max((len(c) for c in candidates), default=1)
        count = len(rows)
        row_array = np.array(rows, dtype=np.int64).reshape(count, 3)
        lengths = np.array([len(c) for c in candidates], dtype=np.int64)
        candidate_mask = np.arange(width) < lengths[:, None]
        candidate_nodes = np.repeat(row_array[:, 2:3], width, axis=1)
        candidate_nodes[candidate_mask] = np.array(slot_nodes, dtype=np.int64)
        candidate_is_attack = np.zeros((count, width))
        candidate_is_attack[candidate_mask] = np.array(slot_attack, dtype=np.float64)

        return cls(
            node_count=n,
            features=features,
            attention_mask=mask,
            neighbor_weights=neighbor_weights,
            opponent_weights=opponent_weights,
            row_sample=row_array[:, 0],
            row_agent=row_array[:, 1],
            row_node=row_array[:, 2],
            candidates=candidates,
            candidate_nodes=candidate_nodes,
            candidate_mask=candidate_mask,
            candidate_is_attack=candidate_is_attack,
            reference_index=np.array(references, dtype=np.int64) if with_reference else None,
            perspective=perspective,
            team_start=team[0],
        )

    @property
    def batch_size(self) -> int:
        return self.features.shape[0]

    @property
    def row_count(self) -> int:
        return len(self.row_sample)

    @property
    def row_flat(self) -> np.ndarray:
        return self.row_sample * self.node_count + self.row_node

    @property
    def candidate_flat(self) -> np.ndarray:
        return self.row_sample[:, None] * self.node_count + self.candidate_nodes

    @property
    def candidate_counts(self) -> np.ndarray:
        return self.candidate_mask.sum(axis=1)

    @property
    def row_slots(self) -> np.ndarray:
        """B×m row index of each state's k-th alive agent, -1 past its last one."""
        counts = np.bincount(self.row_sample, minlength=self.batch_size)
        slots = np.full((self.batch_size, int(counts.max(initial=0))), -1, dtype=np.int64)
        rank = np.arange(self.row_count) - np.repeat(np.cumsum(counts) - counts, counts)
        slots[self.row_sample, rank] = np.arange(self.row_count)
        return slots

    def sum_rows(self, row_values) -> Tensor:
        """Per-state sum of one value per row, added in agent order starting from 0."""
        slots = self.row_slots
        total = ad.constant(np.zeros(self.batch_size))
        for k in range(slots.shape[1]):
            present = slots[:, k] >= 0
            total = total + ad.gather(row_values, np.where(present, slots[:, k], 0)) * present.astype(np.float64)
        return total

    def action_index(self, team_actions: Sequence[Sequence[Action]]) -> np.ndarray:
        """Candidate index of each row's action, given one team action list per state."""
        index = np.zeros(self.row_count, dtype=np.int64)
        for r in range(self.row_count):
            chosen = team_actions[self.row_sample[r]][self.row_agent[r] - self.team_start]
            try:
                index[r] = self.candidates[r].index(chosen)
            except ValueError as e:
                raise ShapeMismatch(f"action {chosen} is not a candidate of agent {self.row_agent[r]}") from e
        return index


class PolicyOutput(NamedTuple):
    probs: Tensor       # R×K, zero on padded slots
    log_probs: Tensor   # R×K, zero on padded slots


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead, (n, d) = x.shape[:-2], x.shape[-2:]
    k = len(lead)
    split = ad.reshape(x, lead + (n, heads, d // heads))
    return ad.permute(split, list(range(k)) + [k + 1, k, k + 2])


def _merge_heads(x: Tensor) -> Tensor:
    lead, (heads, n, dh) = x.shape[:-3], x.shape[-3:]
    k = len(lead)
    merged = ad.permute(x, list(range(k)) + [k + 1, k, k + 2])
    return ad.reshape(merged, lead + (n, heads * dh))


class PolicyNetwork:
    """Forward passes over a parameter mapping; holds only shapes, never weights."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg

    @staticmethod
    def _p(params: Params, name: str) -> Tensor:
        return ad.constant(params[name])

    def _multi_head(self, params: Params, base: str, queries: Tensor, keys: Tensor, mask) -> Tensor:
        heads = self.cfg.attention_heads
        q = _split_heads(queries @ self._p(params, f"{base}.W_Q"), heads)
        k = _split_heads(keys @ self._p(params, f"{base}.W_K"), heads)
        v = _split_heads(keys @ self._p(params, f"{base}.W_V"), heads)
        return _merge_heads(ad.masked_attention(q, k, v, mask))

    def encode(self, params: Params, features, attention_mask, prefix: str = "actor") -> Tensor:
        """n×f (or B×n×f) features to n×d (or B×n×d) node embeddings."""
        features = ad.constant(features)
        if features.shape[-1] != self.cfg.feature_width:
            raise ShapeMismatch(f"features have {features.shape[-1]} columns, network expects {self.cfg.feature_width}")
        n = features.shape[-2]
        mask = np.asarray(attention_mask, dtype=bool) | np.eye(n, dtype=bool)
        if mask.shape[-2:] != (n, n):
            raise ShapeMismatch(f"attention mask {mask.shape} does not match {n} nodes")
        eps = self.cfg.layer_norm_eps
        h = features @ self._p(params, f"{prefix}.enc.input.W") + self._p(params, f"{prefix}.enc.input.b")
        for layer in range(self.cfg.encoder_layers):
            base = f"{prefix}.enc.{layer}"
            h = ad.layer_norm(h + self._multi_head(params, base, h, h, mask[..., None, :, :]),
                              self._p(params, f"{base}.ln1.gain"), self._p(params, f"{base}.ln1.bias"), eps)
            ff = ad.relu(h @ self._p(params, f"{base}.ff.W1") + self._p(params, f"{base}.ff.b1"))
            ff = ff @ self._p(params, f"{base}.ff.W2") + self._p(params, f"{base}.ff.b2")
            h = ad.layer_norm(h + ff, self._p(params, f"{base}.ln2.gain"), self._p(params, f"{base}.ln2.bias"), eps)
        return h

    def _decode_rows(self, params: Params, h_hat: Tensor, row_sample: np.ndarray, row_flat: np.ndarray,
                     prefix: str) -> Tensor:
        """R×d contexts: one unmasked attention read of all nodes per row."""
        b, n, d = h_hat.shape
        flat = ad.reshape(h_hat, (b * n, d))
        own = ad.reshape(ad.gather(flat, row_flat), (len(row_flat), 1, d))
        nodes = ad.gather(h_hat, row_sample)
        out = self._multi_head(params, f"{prefix}.dec", own, nodes, np.ones((1, n), dtype=bool))
        return ad.reshape(out, (len(row_flat), d))

    def decode(self, params: Params, h_hat, node: int, prefix: str = "actor") -> Tensor:
        """Agent-centric context of the agent standing at node, for a single n×d embedding."""
        h_hat = ad.constant(h_hat)
        n = h_hat.shape[0]
        if not 0 <= node < n:
            raise NodeOutOfRange(f"node {node} not in 0..{n - 1}")
        batched = ad.reshape(h_hat, (1,) + h_hat.shape)
        context = self._decode_rows(params, batched, np.array([0]), np.array([node]), prefix)
        return ad.reshape(context, (h_hat.shape[1],))

    def _pointer_scores(self, params: Params, h_hat: Tensor, context: Tensor, row_flat: np.ndarray,
                        candidate_flat: np.ndarray) -> Tensor:
        b, n, d = h_hat.shape
        rows, width = candidate_flat.shape
        flat = ad.reshape(h_hat, (b * n, d))
        query = ad.concat([context, ad.gather(flat, row_flat)], axis=-1) @ self._p(params, "actor.ptr.W_q")
        keys = ad.reshape(ad.gather(flat, candidate_flat.reshape(-1)), (rows, width, d))
        keys = keys @ self._p(params, "actor.ptr.W_k")
        scores = ad.reshape(keys @ ad.reshape(query, (rows, d, 1)), (rows, width))
        return ad.scale(scores, 1.0 / np.sqrt(d))

    def actor_distribution(self, params: Params, h_hat, context, node: int, key_nodes: Sequence[int]) -> Tensor:
        """Pointer probabilities over candidates keyed by key_nodes, for a single n×d embedding."""
        if len(key_nodes) == 0:
            raise EmptyCandidates(f"no candidate actions for the agent at node {node}")
        h_hat, context = ad.constant(h_hat), ad.constant(context)
        n, d = h_hat.shape
        if not 0 <= node < n or min(key_nodes) < 0 or max(key_nodes) >= n:
            raise NodeOutOfRange(f"candidate or agent node outside 0..{n - 1}")
        scores = self._pointer_scores(params, ad.reshape(h_hat, (1, n, d)), ad.reshape(context, (1, d)),
                                      np.array([node]), np.array([list(key_nodes)]))
        probs = ad.softmax(scores)
        return ad.reshape(probs, (len(key_nodes),))

    def policy_forward(self, params: Params, batch: AgentBatch) -> PolicyOutput:
        if batch.row_count == 0:
            raise EmptyBatch("no alive agent rows in batch")
        h_hat = self.encode(params, batch.features, batch.attention_mask, "actor")
        context = self._decode_rows(params, h_hat, batch.row_sample, batch.row_flat, "actor")
        scores = self._pointer_scores(params, h_hat, context, batch.row_flat, batch.candidate_flat)
        probs = ad.masked_softmax(scores, batch.candidate_mask)
        log_probs = ad.log(probs + (1.0 - batch.candidate_mask))
        return PolicyOutput(probs, log_probs)

    def critic_values(self, params: Params, batch: AgentBatch, critic: str) -> Tensor:
        """R×K per-agent values Q_i(s, a) for every candidate a; padded slots are meaningless."""
        if batch.row_count == 0:
            raise EmptyBatch("no alive agent rows in batch")
        h_hat = self.encode(params, batch.features, batch.attention_mask, critic)
        b, n, d = h_hat.shape
        rows, width = batch.candidate_mask.shape
        flat = ad.reshape(h_hat, (b * n, d))
        context = self._decode_rows(params, h_hat, batch.row_sample, batch.row_flat, critic)
        own = ad.gather(flat, batch.row_flat)
        neighbor_pool = ad.gather(ad.reshape(ad.matmul(batch.neighbor_weights, h_hat), (b * n, d)), batch.row_flat)
        opponent_pool = ad.reshape(ad.constant(batch.opponent_weights.reshape(b, 1, n)) @ h_hat, (b, d))
        opponent_pool = ad.gather(opponent_pool, batch.row_sample)
        common = ad.concat([context, own, neighbor_pool, opponent_pool], axis=-1) @ self._p(params, f"{critic}.mlp.W1a")

        targets = ad.reshape(ad.gather(flat, batch.candidate_flat.reshape(-1)), (rows, width, d))
        kind = np.stack([1.0 - batch.candidate_is_attack, batch.candidate_is_attack], axis=-1)
        action_part = ad.concat([targets, ad.constant(kind)], axis=-1) @ self._p(params, f"{critic}.mlp.W1b")

        hidden = ad.relu(action_part + ad.reshape(common, (rows, 1, common.shape[-1]))
                         + self._p(params, f"{critic}.mlp.b1"))
        q = hidden @ self._p(params, f"{critic}.mlp.W2") + self._p(params, f"{critic}.mlp.b2")
        return ad.reshape(q, (rows, width))

    def critic_q_vdn(self, params: Params, batch: AgentBatch, action_index: np.ndarray,
                     critic: str) -> Tuple[Tensor, Tensor]:
        """Per-agent Q of the chosen actions (R) and their VDN sum per state (B)."""
        action_index = np.asarray(action_index, dtype=np.int64)
        if action_index.shape != (batch.row_count,):
            raise ShapeMismatch(f"need one action per agent row ({batch.row_count}), got {action_index.shape}")
        return self.chosen_q(batch, self.critic_values(params, batch, critic), action_index)

    @staticmethod
    def chosen_q(batch: AgentBatch, values: Tensor, action_index: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Select one candidate per row out of R×K values, then sum rows per state."""
        rows, width = values.shape
        per_agent = ad.gather(ad.reshape(values, (rows * width,)), np.arange(rows) * width + action_index)
        return per_agent, batch.sum_rows(per_agent)

    def select_actions(self, params: Params, game: GraphGame, state: GameState, team: Team,
                       greedy: bool, rng: Optional[np.random.Generator] = None) -> List[Action]:
        """Joint action for one team: argmax (lowest index on ties) or a sample per alive agent."""
        agents = list(game.team_agents(team))
        joint = [game.noop(state, a) for a in agents]
        batch = AgentBatch.build(game, [state], perspective=team)
        if batch.row_count == 0:
            return joint
        probs = self.policy_forward(params, batch).probs.values
        for r in range(batch.row_count):
            count = len(batch.candidates[r])
            p = probs[r, :count]
            if greedy:
                k = int(np.argmax(p))
            else:
                k = int(rng.choice(count, p=p / p.sum()))
            joint[batch.row_agent[r] - agents[0]] = batch.candidates[r][k]
        return joint


@dataclass
class Checkpoint:
    header: CheckpointHeader
    params: ParameterSet
    targets: ParameterSet
    log_alpha: float
    log_beta: float
    extra: Dict[str, float] = field(default_factory=dict)


def save_checkpoint(path: Union[str, Path], params: ParameterSet, targets: ParameterSet,
                    coefficients: Mapping[str, float], header: CheckpointHeader) -> None:
    """Magic line, one JSON header line, then the little-endian float64 payload."""
    arrays: List[Tuple[str, np.ndarray]] = list(params.items())
    arrays += [(f"target.{name}", arr) for name, arr in targets.items()]
    arrays += [(name, np.array(float(value))) for name, value in sorted(coefficients.items())]
    entries, offset = [], 0
    for name, arr in arrays:
        entries.append(CheckpointEntry(name=name, shape=list(arr.shape), offset=offset))
        offset += arr.size
    header = header.model_copy(update={"entries": entries})
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(header.model_dump_json().encode("utf-8") + b"\n")
        f.write(payload)
    logger.info(f"Wrote checkpoint {path} ({offset} values)")


def load_checkpoint(path: Union[str, Path], expected_digest: Optional[str] = None) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise IncompatibleCheckpoint(f"{path} is not a checkpoint file")
    header_end = blob.index(b"\n", len(CHECKPOINT_MAGIC))
    try:
        header = CheckpointHeader.model_validate_json(blob[len(CHECKPOINT_MAGIC):header_end])
    except ValueError as e:
        raise IncompatibleCheckpoint(f"{path}: unreadable header: {e}") from e
    if header.format_version != 1:
        raise IncompatibleCheckpoint(f"{path}: unsupported format version {header.format_version}")
    if expected_digest is not None and header.config_digest != expected_digest:
        raise IncompatibleCheckpoint(
            f"{path}: config digest {header.config_digest[:12]} does not match expected {expected_digest[:12]}")

    values = np.frombuffer(blob[header_end + 1:], dtype="<f8")
    params, targets, scalars = {}, {}, {}
    for entry in header.entries:
        size = int(np.prod(entry.shape)) if entry.shape else 1
        if entry.offset + size > values.size:
            raise IncompatibleCheckpoint(f"{path}: payload truncated at entry {entry.name}")
        arr = values[entry.offset:entry.offset + size].astype(np.float64).reshape(entry.shape)
        if entry.name.startswith("target."):
            targets[entry.name[len("target."):]] = arr
        elif not entry.shape:
            scalars[entry.name] = float(arr)
        else:
            params[entry.name] = arr

    expected = {name: tuple(shape) for name, shape, _ in parameter_shapes(header.network)}
    found = {name: arr.shape for name, arr in params.items()}
    if found != expected:
        raise IncompatibleCheckpoint(f"{path}: parameter table does not match the network config")
    logger.info(f"Loaded checkpoint {path}")
    return Checkpoint(
        header=header,
        params=ParameterSet(params),
        targets=ParameterSet(targets),
        log_alpha=scalars.pop("log_alpha", float(np.log(0.2))),
        log_beta=scalars.pop("log_beta", 0.0),
        extra=scalars,
    )
