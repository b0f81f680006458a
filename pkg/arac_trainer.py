"""
Regularized actor-critic updates: twin VDN critics, a policy pulled toward a
scripted reference by a KL term, and adaptive entropy (alpha) and
regularization (beta) coefficients.

Discrete pointer distributions let entropy, KL and the policy-loss
expectation be computed exactly by summing over candidates.
"""
import dataclasses
import logging
import math
import threading
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import tensor_autodiff as ad
from errors import BufferTooSmall, ConfigError, EmptyBatch, ShapeMismatch, SupportMismatch
from games import Action, GameState, GraphGame, Team
from models import NetworkConfig, RunConfig, TrainerMode, TrainMetrics
from policy_nets import CRITICS, AgentBatch, Params, ParameterSet, PolicyNetwork
from tensor_autodiff import Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Transition:
    state: GameState
    actions: Tuple[Action, ...]   # our team, in team_agents order
    reward: float
    next_state: GameState
    terminal: bool

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError(f"non-finite reward {self.reward}")


class ReplayBuffer:
    """Bounded FIFO of transitions; insert and sample are mutually exclusive."""

    def __init__(self, capacity: int = 2000):
        if capacity < 1:
            raise ConfigError(f"buffer capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    def add(self, transition: Transition) -> None:
        with self._lock:
            self._items.append(transition)

    def extend(self, transitions: Sequence[Transition]) -> None:
        with self._lock:
            self._items.extend(transitions)

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Transition]:
        """Uniform, without replacement within the batch."""
        with self._lock:
            if len(self._items) < batch_size:
                raise BufferTooSmall(f"buffer holds {len(self._items)} transitions, batch needs {batch_size}")
            picks = rng.choice(len(self._items), size=batch_size, replace=False)
            return [self._items[int(i)] for i in picks]


@dataclass(frozen=True)
class Coefficients:
    log_alpha: float = math.log(0.2)
    log_beta: float = 0.0
    target_entropy_factor: float = 0.05
    target_kl: float = 1.0
    tau: float = 0.005
    gamma: float = 0.99
    learning_rate: float = 1e-5
    coef_learning_rate: float = 1e-5
    kl_statistic: str = "mean"

    def __post_init__(self):
        # gamma = 0 is accepted here (one-step targets); run configs still require gamma > 0
        if not 0 <= self.gamma <= 1:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0 < self.tau <= 1:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if self.kl_statistic not in ("mean", "sum"):
            raise ConfigError(f"kl_statistic must be 'mean' or 'sum', got {self.kl_statistic}")

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    @property
    def beta(self) -> float:
        return math.exp(self.log_beta)

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "Coefficients":
        return cls(
            log_alpha=math.log(cfg.init_alpha),
            log_beta=math.log(cfg.init_beta),
            target_entropy_factor=cfg.target_entropy_factor,
            target_kl=cfg.target_kl,
            tau=cfg.tau,
            gamma=cfg.gamma,
            learning_rate=cfg.learning_rate,
            coef_learning_rate=cfg.resolved_coef_learning_rate,
            kl_statistic=cfg.kl_statistic,
        )

    def replace(self, **changes) -> "Coefficients":
        return dataclasses.replace(self, **changes)


def kl_weight(coeffs: Coefficients, mode: TrainerMode) -> float:
    """Effective beta: frozen at 0 in SAC mode."""
    return 0.0 if mode == TrainerMode.SAC else coeffs.beta


class JointTerms(NamedTuple):
    entropy: float
    kl: float
    agent_entropy: List[float]
    agent_kl: List[float]


def joint_terms(distributions: Sequence[np.ndarray], references: Sequence[np.ndarray]) -> JointTerms:
    """Team entropy and D_KL(ref || pi), both summed over agents."""
    if len(distributions) != len(references):
        raise SupportMismatch(f"{len(distributions)} distributions but {len(references)} references")
    entropies, kls = [], []
    for pi, ref in zip(distributions, references):
        pi, ref = np.asarray(pi, dtype=np.float64), np.asarray(ref, dtype=np.float64)
        if pi.shape != ref.shape:
            raise SupportMismatch(f"distribution over {pi.shape} actions, reference over {ref.shape}")
        if np.any((ref > 0) & (pi <= 0)):
            raise SupportMismatch("reference puts mass on an action the policy cannot take")
        nz = pi > 0
        entropies.append(float(-np.sum(pi[nz] * np.log(pi[nz]))))
        rz = ref > 0
        kls.append(float(np.sum(ref[rz] * (np.log(ref[rz]) - np.log(pi[rz])))))
    return JointTerms(sum(entropies), sum(kls), entropies, kls)


@dataclass
class TransitionBatch:
    current: AgentBatch
    following: AgentBatch
    action_index: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray

    @classmethod
    def build(cls, game: GraphGame, transitions: Sequence[Transition], with_reference: bool) -> "TransitionBatch":
        if not transitions:
            raise EmptyBatch("empty transition batch")
        current = AgentBatch.build(game, [t.state for t in transitions], Team.OURS, with_reference)
        following = AgentBatch.build(game, [t.next_state for t in transitions], Team.OURS, with_reference)
        return cls(
            current=current,
            following=following,
            action_index=current.action_index([t.actions for t in transitions]),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            terminal=np.array([t.terminal for t in transitions], dtype=np.float64),
        )

    @property
    def size(self) -> int:
        return len(self.rewards)


def _one_hot(index: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(index), width))
    out[np.arange(len(index)), index] = 1.0
    return out


def _sample_rows(probs: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One inverse-CDF draw per row, restricted to its legal slots."""
    cdf = np.cumsum(np.where(mask, probs, 0.0), axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    index = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(index, mask.sum(axis=1) - 1).astype(np.int64)


class CriticLosses(NamedTuple):
    critic1: Tensor
    critic2: Tensor
    target: np.ndarray
    values: Tuple[np.ndarray, ...]  # online R×K values on the current states, one per critic

    @property
    def total(self) -> Tensor:
        return self.critic1 + self.critic2


def critic_loss(net: PolicyNetwork, params: Params, targets: Params, batch: TransitionBatch,
                coeffs: Coefficients, mode: TrainerMode = TrainerMode.ARAC,
                rng: Optional[np.random.Generator] = None,
                next_action_index: Optional[np.ndarray] = None) -> CriticLosses:
    """
    Mean over the batch of 0.5 (Q_i(s, a) - y)^2 for both critics, with
    y = r + gamma (1 - done) (min_j Qbar_j(s', a') - alpha log pi(a'|s') - beta KL(ref || pi)(s')),
    a' sampled from the current policy and every term summed over agents.
    """
    if batch.size == 0:
        raise EmptyBatch("critic loss over an empty batch")
    following = batch.following
    bootstrap = np.zeros(batch.size)
    if following.row_count:
        actor = {n: ad.constant(p).values for n, p in params.items() if n.startswith("actor.")}
        out = net.policy_forward(actor, following)
        log_probs = out.log_probs.values
        if next_action_index is None:
            next_action_index = _sample_rows(out.probs.values, following.candidate_mask,
                                             rng or np.random.default_rng())
        rows = np.arange(following.row_count)
        per_row = -coeffs.alpha * log_probs[rows, next_action_index]
        beta = kl_weight(coeffs, mode)
        if beta > 0 and following.reference_index is not None:
            per_row = per_row - beta * (-log_probs[rows, following.reference_index])
        joint_q = [following.sum_rows(net.critic_values(targets, following, c).values[rows, next_action_index]).values
                   for c in CRITICS]
        bootstrap = np.minimum(*joint_q) + following.sum_rows(per_row).values
    y = batch.rewards + coeffs.gamma * (1.0 - batch.terminal) * bootstrap

    losses, values = [], []
    for critic in CRITICS:
        q = net.critic_values(params, batch.current, critic)
        _, joint = net.chosen_q(batch.current, q, batch.action_index)
        diff = joint - y
        losses.append(ad.scale(ad.reduce_mean(diff * diff), 0.5))
        values.append(q.values)
    return CriticLosses(losses[0], losses[1], y, tuple(values))


class PolicyLoss(NamedTuple):
    loss: Tensor
    entropy: float          # per-agent mean entropy
    kl: float               # per-agent mean (or per-state team sum) KL to the reference
    target_entropy: float   # per-agent mean of factor * log(#legal actions)


def _statistics(batch: AgentBatch, probs: np.ndarray, log_probs: np.ndarray, coeffs: Coefficients):
    entropy_rows = -(probs * log_probs).sum(axis=1)
    target_rows = coeffs.target_entropy_factor * np.log(batch.candidate_counts)
    kl = float("nan")
    if batch.reference_index is not None:
        kl_rows = -log_probs[np.arange(batch.row_count), batch.reference_index]
        kl = float(kl_rows.mean()) if coeffs.kl_statistic == "mean" else float(kl_rows.sum() / batch.batch_size)
    return float(entropy_rows.mean()), kl, float(target_rows.mean())


def policy_loss(net: PolicyNetwork, params: Params, critic_params: Params, batch: AgentBatch,
                coeffs: Coefficients, mode: TrainerMode = TrainerMode.ARAC,
                q_values: Optional[Sequence[np.ndarray]] = None) -> PolicyLoss:
    """
    Mean over states of sum_i sum_a pi_i(a) (alpha log pi_i(a) - min_j Q_j,i(s, a)) + beta KL_i,
    critics held constant. q_values, when given, are the R×K critic outputs on batch and
    critic_params is not read.
    """
    if batch.row_count == 0:
        raise EmptyBatch("policy loss over a batch without alive agents")
    out = net.policy_forward(params, batch)
    if q_values is None:
        q_values = [net.critic_values(critic_params, batch, c).values for c in CRITICS]
    if len(q_values) != len(CRITICS) or any(np.shape(q) != batch.candidate_mask.shape for q in q_values):
        raise ShapeMismatch(f"need {len(CRITICS)} critic value arrays of shape {batch.candidate_mask.shape}")
    q_min = np.minimum(*q_values)
    q_min = np.where(batch.candidate_mask, q_min, 0.0)
    row_terms = ad.reduce_sum(out.probs * (ad.scale(out.log_probs, coeffs.alpha) - q_min), axis=-1)
    beta = kl_weight(coeffs, mode)
    if beta > 0 and batch.reference_index is not None:
        ref = _one_hot(batch.reference_index, batch.candidate_mask.shape[1])
        row_terms = row_terms + ad.scale(ad.reduce_sum(out.log_probs * ref, axis=-1), -beta)
    loss = ad.scale(ad.reduce_sum(row_terms), 1.0 / batch.batch_size)
    entropy, kl, target = _statistics(batch, out.probs.values, out.log_probs.values, coeffs)
    return PolicyLoss(loss, entropy, kl, target)


def bc_loss(net: PolicyNetwork, params: Params, batch: AgentBatch) -> Tensor:
    """Mean over states of sum_i -log pi_i(a_ref,i)."""
    if batch.row_count == 0:
        raise EmptyBatch("behavior cloning over a batch without alive agents")
    if batch.reference_index is None:
        raise EmptyBatch("behavior cloning needs reference actions")
    out = net.policy_forward(params, batch)
    ref = _one_hot(batch.reference_index, batch.candidate_mask.shape[1])
    return ad.scale(ad.reduce_sum(out.log_probs * ref), -1.0 / batch.batch_size)


def dual_update(entropy: float, kl: float, target_entropy: float, coeffs: Coefficients,
                update_alpha: bool = True, update_beta: bool = True) -> Coefficients:
    """
    One gradient step on J(alpha) = alpha (H - Hbar) and J(beta) = beta (Dbar - D)
    with respect to the log parameters.
    """
    log_alpha, log_beta = coeffs.log_alpha, coeffs.log_beta
    lr = coeffs.coef_learning_rate
    if update_alpha:
        if math.isfinite(entropy) and math.isfinite(target_entropy):
            log_alpha -= lr * coeffs.alpha * (entropy - target_entropy)
        else:
            logger.warning(f"Skipping alpha update: entropy statistic {entropy}")
    if update_beta:
        if math.isfinite(kl):
            log_beta -= lr * coeffs.beta * (coeffs.target_kl - kl)
        else:
            logger.warning(f"Skipping beta update: KL statistic {kl}")
    return coeffs.replace(log_alpha=log_alpha, log_beta=log_beta)


def soft_update(target: ParameterSet, online: ParameterSet, tau: float) -> ParameterSet:
    """(1 - tau) target + tau online, for every array the target holds."""
    updated = {}
    for name, old in target.items():
        if name not in online:
            raise ShapeMismatch(f"online parameters have no {name}")
        new = online[name]
        if new.shape != old.shape:
            raise ShapeMismatch(f"{name}: target {old.shape} vs online {new.shape}")
        updated[name] = (1.0 - tau) * old + tau * new
    return ParameterSet(updated)


class Adam:
    """Adam with one moment pair and step count per named array."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self._t: Dict[str, int] = {}

    def step(self, params: ParameterSet, grads: Mapping[str, np.ndarray]) -> None:
        updates = {}
        for name, g in grads.items():
            m = self.beta1 * self._m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self._v.get(name, 0.0) + (1 - self.beta2) * g * g
            t = self._t.get(name, 0) + 1
            self._m[name], self._v[name], self._t[name] = m, v, t
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            updates[name] = params[name] - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        params.update(updates)


class AracTrainer:
    """Owns the online and target parameters, optimizers and coefficients."""

    def __init__(self, game: GraphGame, net_cfg: NetworkConfig, coeffs: Coefficients,
                 mode: TrainerMode = TrainerMode.ARAC, batch_size: int = 128,
                 params: Optional[ParameterSet] = None, targets: Optional[ParameterSet] = None,
                 rng: Optional[np.random.Generator] = None):
        self.game = game
        self.net = PolicyNetwork(net_cfg)
        self.mode = mode
        self.batch_size = batch_size
        self.rng = rng if rng is not None else np.random.default_rng()
        self.params = params if params is not None else ParameterSet.initialize(net_cfg, self.rng)
        self.targets = targets if targets is not None else self.params.subset(CRITICS).copy()
        self.coeffs = coeffs
        self.actor_optimizer = Adam(coeffs.learning_rate)
        self.critic_optimizer = Adam(coeffs.learning_rate)

    @classmethod
    def from_run_config(cls, cfg: RunConfig, game: GraphGame, rng: np.random.Generator) -> "AracTrainer":
        return cls(game, cfg.network_config(), Coefficients.from_run_config(cfg), cfg.mode, cfg.batch_size, rng=rng)

    @property
    def uses_reference(self) -> bool:
        return self.mode in (TrainerMode.ARAC, TrainerMode.BRAC, TrainerMode.BC)

    def state_dict(self) -> Dict[str, float]:
        return {"log_alpha": self.coeffs.log_alpha, "log_beta": self.coeffs.log_beta}

    def act(self, state: GameState, greedy: bool = False) -> List[Action]:
        return self.net.select_actions(self.params.arrays, self.game, state, Team.OURS, greedy, self.rng)

    def _metrics(self, episode: int, step: int, **values) -> TrainMetrics:
        beta = kl_weight(self.coeffs, self.mode)
        return TrainMetrics(episode=episode, step=step, alpha=self.coeffs.alpha, beta=beta, **values)

    def train_step(self, buffer: ReplayBuffer, episode: int = 0, step: int = 0) -> TrainMetrics:
        """Critics, policy, alpha, beta, then target networks; a no-op while the buffer is short."""
        if self.mode == TrainerMode.REF:
            return self._metrics(episode, step)
        try:
            transitions = buffer.sample(self.batch_size, self.rng)
        except BufferTooSmall as e:
            logger.debug(f"Skipping train step: {e}")
            return self._metrics(episode, step, skipped=True)
        if self.mode == TrainerMode.BC:
            current = AgentBatch.build(self.game, [t.state for t in transitions], Team.OURS, with_reference=True)
            tape = Tape()
            loss = bc_loss(self.net, self.params.tensors(tape, trainable=["actor"]), current)
            self.actor_optimizer.step(self.params, tape.gradients(loss))
            return self._metrics(episode, step, policy_loss=loss.item(), batch_size=len(transitions))

        batch = TransitionBatch.build(self.game, transitions, with_reference=self.uses_reference)

        tape = Tape()
        critics = critic_loss(self.net, self.params.tensors(tape, trainable=CRITICS), self.targets.arrays,
                              batch, self.coeffs, self.mode, self.rng)
        self.critic_optimizer.step(self.params, tape.gradients(critics.total))

        # the policy step reads the critic values of the critic pass above, taken before its update
        tape = Tape()
        policy = policy_loss(self.net, self.params.tensors(tape, trainable=["actor"]), self.params.arrays,
                             batch.current, self.coeffs, self.mode, q_values=critics.values)
        self.actor_optimizer.step(self.params, tape.gradients(policy.loss))

        self.coeffs = dual_update(policy.entropy, policy.kl, policy.target_entropy, self.coeffs,
                                  update_alpha=True, update_beta=self.mode == TrainerMode.ARAC)
        self.targets = soft_update(self.targets, self.params, self.coeffs.tau)

        return self._metrics(
            episode, step,
            critic1_loss=critics.critic1.item(),
            critic2_loss=critics.critic2.item(),
            policy_loss=policy.loss.item(),
            entropy=policy.entropy,
            kl=policy.kl if math.isfinite(policy.kl) else None,
            target_entropy=policy.target_entropy,
            batch_size=batch.size,
        )
