"""
Regularized policy evaluation and iteration on small explicit MDPs.

The regularizer per state is
    Omega_s(pi) = alpha * H(pi(.|s)) - beta * KL(pi_ref(.|s) || pi(.|s)),
and the policy Bellman operator is
    (T^pi Q)(s, a) = r(s, a) + gamma * sum_s' P(s'|s, a) (sum_a' pi(a'|s') Q(s', a') + Omega_s'(pi)).

certify() checks numerically that T^pi is a gamma-contraction, that the
regularized greedy step never lowers V, and that policy iteration produces
a monotone value trace.
"""
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np
from jinja2 import Environment, FileSystemLoader
from tqdm import tqdm

from errors import NonConvergence, ShapeMismatch, SupportMismatch
from models import CertificateReport

logger = logging.getLogger(__name__)

template_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'templates')
template_env = Environment(loader=FileSystemLoader(searchpath=template_dir), keep_trailing_newline=True)

ROW_TOLERANCE = 1e-9


def _check_rows(probs: np.ndarray, what: str) -> None:
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=-1), 1.0, rtol=0.0, atol=ROW_TOLERANCE):
        raise ValueError(f"{what} rows must be probability vectors")


@dataclass(frozen=True)
class TabularMDP:
    transitions: np.ndarray   # S×A×S
    rewards: np.ndarray       # S×A
    gamma: float

    def __post_init__(self):
        p = np.asarray(self.transitions, dtype=np.float64)
        r = np.asarray(self.rewards, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or r.shape != p.shape[:2]:
            raise ShapeMismatch(f"transitions {p.shape} and rewards {r.shape} do not describe one MDP")
        if not np.isfinite(r).all():
            raise ValueError("rewards must be finite")
        if not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        _check_rows(p, "transition")
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "rewards", r)

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray   # S×A

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ShapeMismatch(f"policy must be S×A, got {p.shape}")
        _check_rows(p, "policy")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    def total_variation(self, other: "TabularPolicy") -> np.ndarray:
        return 0.5 * np.abs(self.probs - other.probs).sum(axis=1)


@dataclass(frozen=True)
class RegularizerSpec:
    alpha: float
    beta: float
    reference: TabularPolicy

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x * log(y) with 0 log 0 = 0."""
    out = np.zeros(np.broadcast(x, y).shape)
    nz = np.broadcast_to(x, out.shape) > 0
    with np.errstate(divide="ignore"):
        out[nz] = np.broadcast_to(x, out.shape)[nz] * np.log(np.broadcast_to(y, out.shape)[nz])
    return out


def omega(policy: TabularPolicy, reg: RegularizerSpec) -> np.ndarray:
    """Per-state regularizer value."""
    pi, ref = policy.probs, reg.reference.probs
    if pi.shape != ref.shape:
        raise ShapeMismatch(f"policy {pi.shape} vs reference {ref.shape}")
    value = np.zeros(pi.shape[0])
    if reg.alpha > 0:
        value += reg.alpha * -_xlogy(pi, pi).sum(axis=1)
    if reg.beta > 0:
        if np.any((ref > 0) & (pi <= 0)):
            raise SupportMismatch("KL(ref || pi) is infinite: pi misses part of the reference support")
        kl = (_xlogy(ref, ref) - _xlogy(ref, pi)).sum(axis=1)
        value -= reg.beta * kl
    return value


def bellman_apply(q: np.ndarray, policy: TabularPolicy, mdp: TabularMDP, reg: RegularizerSpec) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != mdp.rewards.shape or policy.probs.shape != mdp.rewards.shape:
        raise ShapeMismatch(f"Q {q.shape}, policy {policy.probs.shape}, MDP {mdp.rewards.shape}")
    v_next = (policy.probs * q).sum(axis=1) + omega(policy, reg)
    return mdp.rewards + mdp.gamma * mdp.transitions @ v_next


def evaluate_policy(mdp: TabularMDP, policy: TabularPolicy, reg: RegularizerSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(Q^pi, V^pi) from V = (I - gamma P_pi)^-1 (r_pi + Omega)."""
    pi = policy.probs
    if pi.shape != mdp.rewards.shape:
        raise ShapeMismatch(f"policy {pi.shape} vs MDP {mdp.rewards.shape}")
    p_pi = np.einsum("sa,sat->st", pi, mdp.transitions)
    r_pi = (pi * mdp.rewards).sum(axis=1) + omega(policy, reg)
    v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)
    q = mdp.rewards + mdp.gamma * mdp.transitions @ v
    return q, v


def contraction_check(mdp: TabularMDP, policy: TabularPolicy, reg: RegularizerSpec, trials: int = 100,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Largest ||T Q1 - T Q2||_inf / ||Q1 - Q2||_inf over random pairs."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for _ in range(trials):
        q1 = rng.normal(scale=10.0, size=mdp.rewards.shape)
        q2 = rng.normal(scale=10.0, size=mdp.rewards.shape)
        gap = np.abs(q1 - q2).max()
        if gap == 0:
            continue
        diff = np.abs(bellman_apply(q1, policy, mdp, reg) - bellman_apply(q2, policy, mdp, reg)).max()
        worst = max(worst, float(diff / gap))
    return worst


def regularized_objective(mu: np.ndarray, q: np.ndarray, reg: RegularizerSpec) -> np.ndarray:
    """Per-state E_mu[Q] + Omega_s(mu)."""
    return (mu * q).sum(axis=1) + omega(TabularPolicy(mu), reg)


def improve_policy(q: np.ndarray, reg: RegularizerSpec, tol: float = 1e-13, max_iter: int = 200) -> TabularPolicy:
    """
    Per-state maximizer of E_mu[Q(s, .)] + Omega_s(mu) over the simplex.

    With beta > 0 the maximizer satisfies, for every action a,
        q_a - alpha (log mu_a + 1) + beta ref_a / mu_a = lambda_s,
    with lambda_s fixed by sum_a mu_a = 1. Both the per-action equation and
    the normalizer are solved by bracketed Newton iteration.
    """
    q = np.asarray(q, dtype=np.float64)
    if not np.isfinite(q).all():
        raise ValueError("Q must be finite")
    ref = reg.reference.probs
    if ref.shape != q.shape:
        raise ShapeMismatch(f"Q {q.shape} vs reference {ref.shape}")
    n_states, n_actions = q.shape
    if reg.alpha == 0 and reg.beta == 0:
        greedy = np.zeros_like(q)
        greedy[np.arange(n_states), np.argmax(q, axis=1)] = 1.0
        return TabularPolicy(greedy)
    if reg.beta == 0:
        z = q / reg.alpha
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return TabularPolicy(z / z.sum(axis=1, keepdims=True))
    if reg.alpha == 0:
        mu = _kl_greedy(q, ref, reg.beta, tol, max_iter)
    else:
        mu = _entropy_kl_greedy(q, ref, reg.alpha, reg.beta, tol, max_iter)
    return TabularPolicy(mu / mu.sum(axis=1, keepdims=True))


def _bracketed_newton(fn: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]], lo: np.ndarray, hi: np.ndarray,
                      x: np.ndarray, tol, max_iter: int, what: str) -> np.ndarray:
    """Elementwise root of a decreasing function inside [lo, hi]; Newton steps, bisection when they leave the bracket."""
    for _ in range(max_iter):
        value, slope = fn(x)
        if not np.isfinite(value).all():
            raise NonConvergence(f"{what}: non-finite value during root finding")
        lo = np.where(value > 0, x, lo)
        hi = np.where(value < 0, x, hi)
        done = (np.abs(value) <= tol) | (hi - lo <= 1e-15 * np.maximum(1.0, np.abs(x)))
        if done.all():
            return x
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            newton = x - value / slope
        inside = np.isfinite(newton) & (newton > lo) & (newton < hi)
        settled = inside & (np.abs(newton - x) <= 1e-13 * np.maximum(1.0, np.abs(x)))
        if (done | settled).all():
            return np.where(settled & ~done, newton, x)
        x = np.where(done, x, np.where(inside, newton, 0.5 * (lo + hi)))
    raise NonConvergence(f"{what} did not converge in {max_iter} iterations")


def _entropy_kl_greedy(q: np.ndarray, ref: np.ndarray, alpha: float, beta: float, tol: float,
                       max_iter: int) -> np.ndarray:
    n_actions = q.shape[1]
    log_mu = np.full(q.shape, -np.log(n_actions))

    def log_probs(lam: np.ndarray) -> np.ndarray:
        # g(u) = c - alpha u + beta ref e^-u is decreasing in u = log mu
        c = q - alpha - lam[:, None]

        def g(u):
            pull = beta * ref * np.exp(np.minimum(-u, 700.0))
            return c - alpha * u + pull, -alpha - pull

        lo = c / alpha
        hi = np.maximum(0.0, (c + beta * ref) / alpha)
        start = np.where(ref > 0, np.clip(log_mu, lo, hi), lo)   # without a reference pull the root is lo
        return _bracketed_newton(g, lo, hi, start, 1e-14 * (1.0 + np.abs(c)), max_iter,
                                 "per-action improvement")

    def normalizer(lam: np.ndarray):
        nonlocal log_mu
        log_mu = log_probs(lam)
        mu = np.exp(log_mu)
        denom = alpha * mu + beta * ref
        slope = -np.divide(mu * mu, denom, out=np.zeros_like(mu), where=denom > 0).sum(axis=1)
        return mu.sum(axis=1) - 1.0, slope

    # lambda at which each action alone would take probability 1/A
    at_uniform = q + alpha * np.log(n_actions) - alpha + beta * n_actions * ref
    lo, hi = at_uniform.min(axis=1), at_uniform.max(axis=1)
    lam = _bracketed_newton(normalizer, lo, hi, 0.5 * (lo + hi), tol, max_iter, "policy improvement")
    return np.exp(log_probs(lam))


def _kl_greedy(q: np.ndarray, ref: np.ndarray, beta: float, tol: float, max_iter: int) -> np.ndarray:
    """alpha = 0: mu_a = beta ref_a / (lambda - q_a) on the reference support."""
    support = ref > 0
    top = np.where(support, q, -np.inf).max(axis=1)

    def probs(lam: np.ndarray) -> np.ndarray:
        gap = lam[:, None] - q
        return np.divide(beta * ref, gap, out=np.zeros_like(q), where=support)

    def normalizer(lam: np.ndarray):
        gap = lam[:, None] - q
        slope = -np.divide(beta * ref, gap * gap, out=np.zeros_like(q), where=support).sum(axis=1)
        return probs(lam).sum(axis=1) - 1.0, slope

    lam = _bracketed_newton(normalizer, top, top + beta, top + beta, tol, max_iter, "policy improvement")
    # an action outside the support with a higher Q absorbs the remaining mass
    outside = np.where(support, -np.inf, q)
    best_outside = outside.max(axis=1)
    spill = best_outside > lam
    lam = np.where(spill, best_outside, lam)
    mu = probs(lam)
    rows = np.flatnonzero(spill)
    mu[rows, outside[rows].argmax(axis=1)] = 1.0 - mu[rows].sum(axis=1)
    return mu


class PolicyIterationResult(NamedTuple):
    policy: TabularPolicy
    values: np.ndarray
    trace: List[np.ndarray]

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1


def policy_iteration(mdp: TabularMDP, reg: RegularizerSpec, initial: Optional[TabularPolicy] = None,
                     tol: float = 1e-9, max_iter: int = 1000) -> PolicyIterationResult:
    """Alternate exact evaluation and regularized improvement until V moves less than tol."""
    if initial is None:
        initial = reg.reference if reg.beta > 0 else TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
    policy = initial
    q, v = evaluate_policy(mdp, policy, reg)
    trace = [v]
    for _ in range(max_iter):
        policy = improve_policy(q, reg)
        q, v_next = evaluate_policy(mdp, policy, reg)
        trace.append(v_next)
        if np.abs(v_next - v).max() < tol:
            return PolicyIterationResult(policy, v_next, trace)
        v = v_next
    raise NonConvergence(f"policy iteration did not settle within {max_iter} iterations")


def value_iteration(mdp: TabularMDP, tol: float = 1e-12, max_iter: int = 100_000) -> Tuple[np.ndarray, np.ndarray]:
    """Unregularized optimal (V, Q) by repeated Bellman optimality backups."""
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        q = mdp.rewards + mdp.gamma * mdp.transitions @ v
        v_next = q.max(axis=1)
        if np.abs(v_next - v).max() < tol:
            return v_next, mdp.rewards + mdp.gamma * mdp.transitions @ v_next
        v = v_next
    raise NonConvergence(f"value iteration did not settle within {max_iter} iterations")


def random_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator) -> TabularMDP:
    """Dirichlet(1) transition rows, rewards uniform in [-1, 1]."""
    transitions = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    rewards = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    return TabularMDP(transitions, rewards, gamma)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(n_actions), size=n_states))


@dataclass
class InstanceResult:
    seed: int
    ratio: float
    margin: float
    trace_decrease: float
    iterations: int
    shape: Tuple[int, int] = field(default=(0, 0))


def certify_instance(seed: int, max_states: int, max_actions: int, gamma: float, alpha: float, beta: float,
                     trials: int) -> InstanceResult:
    """One random instance, fully determined by its seed."""
    rng = np.random.default_rng(seed)
    n_states = int(rng.integers(1, max_states + 1))
    n_actions = int(rng.integers(2, max_actions + 1))
    mdp = random_mdp(n_states, n_actions, gamma, rng)
    reg = RegularizerSpec(alpha, beta, random_policy(n_states, n_actions, rng))
    policy = random_policy(n_states, n_actions, rng)

    ratio = contraction_check(mdp, policy, reg, trials, rng)
    q, v = evaluate_policy(mdp, policy, reg)
    _, v_improved = evaluate_policy(mdp, improve_policy(q, reg), reg)
    result = policy_iteration(mdp, reg)
    steps = np.diff(np.stack(result.trace), axis=0)
    decrease = float(max(0.0, -steps.min())) if steps.size else 0.0
    return InstanceResult(seed, ratio, float((v_improved - v).min()), decrease, result.iterations,
                           (n_states, n_actions))


def certify(instances: int = 50, seed: int = 0, gamma: float = 0.9, alpha: float = 0.1, beta: float = 0.5,
            max_states: int = 6, max_actions: int = 4, trials: int = 100, progress: bool = True) -> CertificateReport:
    """Check contraction, one-step improvement and monotone policy iteration on random instances."""
    logger.info(f"Certifying {instances} random MDPs (gamma={gamma}, alpha={alpha}, beta={beta}, seed={seed})")
    started = time.perf_counter()
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(instances)]
    results = []
    for instance_seed in tqdm(seeds, desc="certify", disable=not progress):
        results.append(certify_instance(instance_seed, max_states, max_actions, gamma, alpha, beta, trials))
        logger.debug(f"Instance seed={instance_seed} shape={results[-1].shape} ratio={results[-1].ratio:.6f}")

    report = CertificateReport(
        instances=instances,
        seed=seed,
        instance_seeds=seeds,
        gamma=gamma,
        alpha=alpha,
        beta=beta,
        max_contraction_ratio=max((r.ratio for r in results), default=0.0),
        min_improvement_margin=min((r.margin for r in results), default=0.0),
        max_trace_decrease=max((r.trace_decrease for r in results), default=0.0),
        iterations=[r.iterations for r in results],
        runtime_seconds=time.perf_counter() - started,
    )
    level = logging.INFO if report.passed else logging.ERROR
    logger.log(level, f"Certificate {'passed' if report.passed else 'FAILED'}: "
                      f"ratio {report.max_contraction_ratio:.6f}, margin {report.min_improvement_margin:.3e}")
    return report


def render_certificate(report: CertificateReport) -> str:
    return template_env.get_template("certificate_report.txt.j2").render(report=report)
