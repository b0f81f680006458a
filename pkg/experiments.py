"""
Run orchestration: training runs, greedy evaluation, self-play, cross-map
matrices, multi-seed summaries and map generation.

A run directory holds config.conf, map.txt, metrics.csv, final.ckpt,
best.ckpt, report.txt and run.log. Everything in it is reproducible from the
config and its seed.
"""
import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from jinja2 import Environment, FileSystemLoader
from tqdm import tqdm

import tensor_autodiff as ad
from arac_trainer import (AracTrainer, Coefficients, ReplayBuffer, Transition, TransitionBatch, bc_loss,
                          critic_loss, policy_loss)
from errors import ConfigError, ScenarioMismatch
from games import Action, EpisodeLog, GameState, GraphGame, Team, Winner
from graph_world import Graph, read_map, write_map
from models import (METRICS_COLUMNS, CheckpointHeader, EvalReport, NetworkConfig, RunConfig, Scenario,
                    ScenarioConfig, SelfPlayReport, TrainerMode, TrainMetrics)
from policy_nets import CRITICS, Checkpoint, ParameterSet, PolicyNetwork, load_checkpoint, save_checkpoint
from reference_policies import random_team_actions, scripted_team_actions

logger = logging.getLogger(__name__)

template_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'templates')
template_env = Environment(loader=FileSystemLoader(searchpath=template_dir), keep_trailing_newline=True)

TeamPolicy = Callable[[GameState], List[Action]]


def episode_seeds(seed: int, count: int, stream: int = 0) -> List[int]:
    """Reset seeds for `count` episodes; streams keep training and evaluation seeds apart."""
    if count == 0:
        return []
    return [int(s) for s in np.random.SeedSequence([seed, stream]).generate_state(count)]


def load_game(cfg: RunConfig, map_path: Optional[str] = None) -> GraphGame:
    path = map_path or cfg.map_path
    if not path:
        raise ConfigError("map_path is required")
    return GraphGame(cfg.scenario_config(), read_map(path))


def checkpoint_header(cfg: RunConfig) -> CheckpointHeader:
    return CheckpointHeader(config_digest=cfg.digest(), scenario=cfg.scenario_config(), network=cfg.network_config())


class EpisodeOutcome(NamedTuple):
    seed: int
    winner: Winner
    steps: int
    total_reward: float
    log: Optional[EpisodeLog] = None


def play_episode(game: GraphGame, seed: int, ours: TeamPolicy, theirs: TeamPolicy, record: bool = False) -> EpisodeOutcome:
    state = game.reset(seed)
    log = EpisodeLog(game.map_digest, game.cfg, seed) if record else None
    total = 0.0
    while not state.terminal:
        ours_actions, theirs_actions = ours(state), theirs(state)
        result = game.step(state, ours_actions, theirs_actions)
        if log is not None:
            log.record(state.step, ours_actions, theirs_actions, result.reward)
        total += result.reward
        state = result.state
    return EpisodeOutcome(seed, state.winner, state.step, total, log)


def scripted_policy(game: GraphGame, team: Team) -> TeamPolicy:
    return lambda state: scripted_team_actions(game, state, team)


def network_policy(game: GraphGame, net: PolicyNetwork, params: ParameterSet, team: Team, greedy: bool,
                   rng: Optional[np.random.Generator] = None) -> TeamPolicy:
    return lambda state: net.select_actions(params.arrays, game, state, team, greedy, rng)


def training_opponent(game: GraphGame, cfg: RunConfig, rng: np.random.Generator) -> TeamPolicy:
    if cfg.opponent_policy == "random":
        return lambda state: random_team_actions(game, state, Team.OPPONENT, rng)
    return scripted_policy(game, Team.OPPONENT)


def run_evaluation(game: GraphGame, ours: TeamPolicy, seeds: Sequence[int], workers: int = 1) -> EvalReport:
    """Scripted opponents; results ordered by episode index whatever the worker count."""
    theirs = scripted_policy(game, Team.OPPONENT)

    def one(seed: int) -> EpisodeOutcome:
        return play_episode(game, seed, ours, theirs)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, seeds))
    else:
        outcomes = [one(s) for s in seeds]
    successes = sum(o.winner is Winner.OURS for o in outcomes)
    return EvalReport(
        success_rate=successes / len(outcomes) if outcomes else 0.0,
        episodes=len(outcomes),
        successes=successes,
        seeds=list(seeds),
        outcomes=[o.winner.value for o in outcomes],
        map_digest=game.map_digest,
    )


def evaluate(cfg: RunConfig, checkpoint: Optional[str] = None, map_path: Optional[str] = None,
             episodes: Optional[int] = None, seed: Optional[int] = None, use_reference: bool = False) -> EvalReport:
    """Greedy evaluation of a checkpoint, or of the scripted reference team when use_reference is set."""
    game = load_game(cfg, map_path)
    seeds = episode_seeds(cfg.seed if seed is None else seed, episodes or cfg.eval_episodes, stream=1)
    if use_reference:
        ours = scripted_policy(game, Team.OURS)
    else:
        if not checkpoint:
            raise ConfigError("evaluation needs a checkpoint unless the reference policy is evaluated")
        loaded = load_checkpoint(checkpoint, expected_digest=cfg.digest())
        ours = network_policy(game, PolicyNetwork(loaded.header.network), loaded.params, Team.OURS, greedy=True)
    report = run_evaluation(game, ours, seeds, cfg.workers)
    logger.info(f"Evaluation on map {game.map_digest[:12]}: {report.successes}/{report.episodes} "
                f"successes ({report.success_rate:.3f})")
    return report


class ReportWriter:
    """Writes rendered reports, and error reports when a run fails, into a run directory."""

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)

    def write_report(self, template_name: str, filename: str = "report.txt", **context) -> Path:
        path = self.run_dir / filename
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(template_env.get_template(template_name).render(**context), encoding="utf-8")
        logger.info(f"Wrote report to {path}")
        return path

    def write_error_report(self, error_msg: str, stack_trace: Optional[str] = None) -> Path:
        content = f"Run failed\n\n{error_msg}\n"
        if stack_trace:
            content += f"\nStack trace:\n{stack_trace}\n"
        path = self.run_dir / "error.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
        logger.info(f"Writing error report to {path}")
        return path


class MetricsWriter:
    """Append-only metrics.csv with the stable column set."""

    def __init__(self, path: Path):
        self._file = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._file, fieldnames=METRICS_COLUMNS)
        self._writer.writeheader()

    def write(self, metrics: TrainMetrics) -> None:
        self._writer.writerow(metrics.model_dump())

    def close(self) -> None:
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class TrainingResult:
    run_dir: Path
    final: EvalReport
    curve: List[Tuple[int, float]] = field(default_factory=list)
    train_steps: int = 0


def run_training(cfg: RunConfig) -> TrainingResult:
    """Interleave acting and updating, evaluate every eval_every episodes, keep final and best checkpoints."""
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.conf").write_text(cfg.to_conf_text(), encoding="utf-8")
    game = load_game(cfg)
    write_map(game.graph, run_dir / "map.txt")
    logger.info(f"Starting {cfg.mode.value} training: {cfg.scenario.value}, {cfg.episodes} episodes, "
                f"seed {cfg.seed}, run dir {run_dir}")

    init_seq, act_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    trainer = AracTrainer.from_run_config(cfg, game, rng=np.random.default_rng(init_seq))
    opponent_rng = np.random.default_rng(act_seq)
    opponent = training_opponent(game, cfg, opponent_rng)
    reference_team = scripted_policy(game, Team.OURS)
    buffer = ReplayBuffer(cfg.buffer_size)
    train_seeds = episode_seeds(cfg.seed, cfg.episodes, stream=0)
    eval_seeds = episode_seeds(cfg.seed, cfg.eval_episodes, stream=1)
    header = checkpoint_header(cfg)

    def evaluate_now() -> EvalReport:
        if cfg.mode == TrainerMode.REF:
            ours = reference_team
        else:
            ours = network_policy(game, trainer.net, trainer.params, Team.OURS, greedy=True)
        return run_evaluation(game, ours, eval_seeds, cfg.workers)

    curve: List[Tuple[int, float]] = []
    best_rate, final, global_step, train_steps = -1.0, None, 0, 0
    with MetricsWriter(run_dir / "metrics.csv") as metrics:
        for episode in tqdm(range(cfg.episodes), desc=f"train {cfg.mode.value}", disable=not cfg.progress):
            state = game.reset(train_seeds[episode])
            while not state.terminal:
                if cfg.mode == TrainerMode.REF:
                    ours = reference_team(state)
                else:
                    ours = trainer.act(state, greedy=False)
                result = game.step(state, ours, opponent(state))
                buffer.add(Transition(state, tuple(ours), result.reward, result.state, result.terminal))
                state = result.state
                global_step += 1
                due = global_step % cfg.update_every == 0
                if cfg.mode != TrainerMode.REF and len(buffer) >= cfg.batch_size and due:
                    metrics.write(trainer.train_step(buffer, episode, global_step))
                    train_steps += 1

            if (episode + 1) % cfg.eval_every == 0:
                final = evaluate_now()
                curve.append((episode + 1, final.success_rate))
                metrics.write(TrainMetrics(episode=episode + 1, step=global_step, success_rate_eval=final.success_rate))
                logger.info(f"Episode {episode + 1}: eval success {final.success_rate:.3f}, "
                            f"alpha {trainer.coeffs.alpha:.4f}, beta {trainer.coeffs.beta:.4f}")
                if final.success_rate > best_rate:
                    best_rate = final.success_rate
                    save_checkpoint(run_dir / "best.ckpt", trainer.params, trainer.targets, trainer.state_dict(), header)

        if final is None or cfg.episodes % cfg.eval_every:
            final = evaluate_now()
            curve.append((cfg.episodes, final.success_rate))
            metrics.write(TrainMetrics(episode=cfg.episodes, step=global_step, success_rate_eval=final.success_rate))
            if final.success_rate > best_rate:
                save_checkpoint(run_dir / "best.ckpt", trainer.params, trainer.targets, trainer.state_dict(), header)

    save_checkpoint(run_dir / "final.ckpt", trainer.params, trainer.targets, trainer.state_dict(), header)
    ReportWriter(run_dir).write_report("run_report.txt.j2", cfg=cfg, report=final, curve=curve,
                                       train_steps=train_steps, env_steps=global_step, map_digest=game.map_digest)
    logger.info(f"Training finished: {train_steps} updates over {global_step} environment steps")
    return TrainingResult(run_dir, final, curve, train_steps)


class SummaryRow(NamedTuple):
    episode: int
    mean: float
    std: float
    n: int


def run_seeds(cfg: RunConfig, seeds: Sequence[int]) -> List[SummaryRow]:
    """Train once per seed under output_dir/seed_<s> and summarize eval success per episode."""
    root = Path(cfg.output_dir)
    curves: Dict[int, List[float]] = {}
    for seed in seeds:
        result = run_training(cfg.model_copy(update={"seed": seed, "output_dir": str(root / f"seed_{seed}")}))
        for episode, rate in result.curve:
            curves.setdefault(episode, []).append(rate)
    rows = [SummaryRow(ep, float(np.mean(r)), float(np.std(r)), len(r)) for ep, r in sorted(curves.items())]
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "summary.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(SummaryRow._fields)
        writer.writerows(rows)
    logger.info(f"Wrote summary over {len(seeds)} seeds to {root / 'summary.csv'}")
    return rows


def _match(game: GraphGame, net: PolicyNetwork, ours: ParameterSet, theirs: ParameterSet,
           seeds: Sequence[int], seed: int) -> Tuple[int, int, int]:
    """(wins, draws, losses) of `ours` playing the first team; sampled actions, one stream per match."""
    rng = np.random.default_rng(seed)
    ours_policy = network_policy(game, net, ours, Team.OURS, greedy=False, rng=rng)
    theirs_policy = network_policy(game, net, theirs, Team.OPPONENT, greedy=False, rng=rng)
    wins = draws = losses = 0
    for s in seeds:
        winner = play_episode(game, s, ours_policy, theirs_policy).winner
        if winner is Winner.OURS:
            wins += 1
        elif winner is Winner.OPPONENT:
            losses += 1
        else:
            draws += 1
    return wins, draws, losses


def self_play(cfg: RunConfig) -> SelfPlayReport:
    """
    Train against a frozen copy of the learner, refreshed every snapshot_every
    episodes; each refresh archives a snapshot and measures the learner against
    the starting policy. Archived snapshots then play each other.
    """
    if cfg.scenario != Scenario.CONFRONTATION:
        raise ScenarioMismatch("self-play needs the confrontation scenario")
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    game = load_game(cfg)
    init_seq, act_seq = np.random.SeedSequence([cfg.seed, 7]).spawn(2)
    trainer = AracTrainer.from_run_config(cfg, game, rng=np.random.default_rng(init_seq))
    if cfg.start_checkpoint:
        start: Checkpoint = load_checkpoint(cfg.start_checkpoint, expected_digest=cfg.digest())
        trainer.params, trainer.targets = start.params.copy(), start.targets.copy()
        trainer.coeffs = trainer.coeffs.replace(log_alpha=start.log_alpha, log_beta=start.log_beta)
    else:
        logger.warning("No start_checkpoint given; self-play starts from freshly initialized parameters")

    initial = trainer.params.copy()
    opponent = initial.copy()
    archive: List[ParameterSet] = [initial]
    report = SelfPlayReport(eval_episodes=cfg.selfplay_eval_episodes, snapshot_episodes=[0])
    eval_seeds = episode_seeds(cfg.seed, cfg.selfplay_eval_episodes, stream=3)
    train_seeds = episode_seeds(cfg.seed, cfg.selfplay_episodes, stream=2)
    opponent_rng = np.random.default_rng(act_seq)
    buffer = ReplayBuffer(cfg.buffer_size)

    wins, draws, _ = _match(game, trainer.net, trainer.params, initial, eval_seeds, cfg.seed)
    report.curve.append((wins + 0.5 * draws) / cfg.selfplay_eval_episodes)
    step = 0
    for episode in tqdm(range(cfg.selfplay_episodes), desc="self-play", disable=not cfg.progress):
        theirs = network_policy(game, trainer.net, opponent, Team.OPPONENT, greedy=False, rng=opponent_rng)
        state = game.reset(train_seeds[episode])
        while not state.terminal:
            ours = trainer.act(state)
            result = game.step(state, ours, theirs(state))
            buffer.add(Transition(state, tuple(ours), result.reward, result.state, result.terminal))
            state = result.state
            step += 1
            if len(buffer) >= cfg.batch_size and step % cfg.update_every == 0:
                trainer.train_step(buffer, episode, step)
        if (episode + 1) % cfg.snapshot_every == 0:
            opponent = trainer.params.copy()
            archive.append(opponent)
            report.snapshot_episodes.append(episode + 1)
            wins, draws, _ = _match(game, trainer.net, trainer.params, initial, eval_seeds, cfg.seed + episode + 1)
            report.curve.append((wins + 0.5 * draws) / cfg.selfplay_eval_episodes)
            logger.info(f"Snapshot {len(archive) - 1} at episode {episode + 1}: "
                        f"score vs start {report.curve[-1]:.3f}")

    k = len(archive)
    report.wins = [[0] * k for _ in range(k)]
    report.draws = [[0] * k for _ in range(k)]
    report.losses = [[0] * k for _ in range(k)]
    for i in range(k):
        for j in range(i, k):
            w, d, lo = _match(game, trainer.net, archive[i], archive[j], eval_seeds, cfg.seed + 1000 * i + j)
            report.wins[i][j], report.draws[i][j], report.losses[i][j] = w, d, lo
            if j != i:
                # the reversed pairing is the same set of games seen from the other side
                report.wins[j][i], report.draws[j][i], report.losses[j][i] = lo, d, w

    (run_dir / "selfplay.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    save_checkpoint(run_dir / "final.ckpt", trainer.params, trainer.targets, trainer.state_dict(),
                    checkpoint_header(cfg))
    return report


def cross_map(cfg: RunConfig, checkpoints: Sequence[str], maps: Sequence[str],
              output: Optional[Union[str, Path]] = None) -> np.ndarray:
    """matrix[test][train] = success of the checkpoint trained on map `train`, evaluated on map `test`."""
    matrix = np.zeros((len(maps), len(checkpoints)))
    for col, ckpt in enumerate(checkpoints):
        for row, map_path in enumerate(maps):
            matrix[row, col] = evaluate(cfg, checkpoint=ckpt, map_path=map_path).success_rate
    if output is not None:
        output = Path(output)
        output.parent.mkdir(parents=True, exist_ok=True)
        with open(output, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["test_map"] + [Path(c).stem for c in checkpoints])
            for map_path, values in zip(maps, matrix):
                writer.writerow([Path(map_path).stem] + [f"{v:.3f}" for v in values])
        logger.info(f"Wrote cross-map matrix to {output}")
    return matrix


def _recursive_tree(size: int, rng: np.random.Generator) -> nx.Graph:
    tree = nx.empty_graph(size)
    tree.add_edges_from((v, int(rng.integers(v))) for v in range(1, size))
    return tree


def generate_map(kind: str, size: int, seed: int = 0, edge_prob: float = 0.1) -> Graph:
    """Connected map: grid (size × size), ring, random recursive tree, or tree plus random extra edges."""
    if size < 2:
        raise ConfigError(f"map size must be at least 2, got {size}")
    rng = np.random.default_rng(seed)
    if kind == "grid":
        g = nx.grid_2d_graph(size, size)
    elif kind == "ring":
        g = nx.cycle_graph(size)
    elif kind == "tree":
        g = _recursive_tree(size, rng)
    elif kind == "random":
        g = nx.compose(_recursive_tree(size, rng), nx.gnp_random_graph(size, edge_prob, seed=int(rng.integers(2**31))))
    else:
        raise ConfigError(f"unknown map kind '{kind}' (grid, ring, tree, random)")
    g = nx.convert_node_labels_to_integers(g, ordering="sorted")
    logger.debug(f"Generated {kind} map: {g.number_of_nodes()} nodes, {g.number_of_edges()} edges")
    return Graph.from_edges(g.number_of_nodes(), g.edges())


def _primitive_checks(rng: np.random.Generator) -> Dict[str, Callable[[ad.Tensor], ad.Tensor]]:
    """Scalar test functions of a 3×4 input, one per primitive; constants drawn once per call."""
    other = rng.normal(size=(4, 5))
    weights = rng.normal(size=(3, 4))
    mask = rng.random((3, 4)) < 0.6
    mask[:, 0] = True
    keys, values = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    gain, bias = rng.normal(size=4), rng.normal(size=4)
    return {
        "matmul": lambda t: ad.reduce_sum(ad.matmul(t, other) * ad.matmul(t, other)),
        "add/sub/mul": lambda t: ad.reduce_sum((t + weights) * (t - weights) * weights),
        "masked_softmax": lambda t: ad.reduce_sum(ad.masked_softmax(t, mask) * weights),
        "layer_norm": lambda t: ad.reduce_sum(ad.layer_norm(t, gain, bias) * weights),
        "relu": lambda t: ad.reduce_sum(ad.relu(t) * weights),
        "concat": lambda t: ad.reduce_sum(ad.concat([t, ad.scale(t, 2.0)], axis=-1) * np.hstack([weights, weights])),
        "gather": lambda t: ad.reduce_sum(ad.gather(t, np.array([2, 0, 2])) * weights),
        "reduce_mean": lambda t: ad.reduce_sum(ad.reduce_mean(t * t, axis=0) * weights[0]),
        "log": lambda t: ad.reduce_sum(ad.log(t * t + 1.0) * weights),
        "exp": lambda t: ad.reduce_sum(ad.exp(ad.scale(t, 0.5)) * weights),
        "masked_attention": lambda t: ad.reduce_sum(ad.masked_attention(t, keys, values, mask) * weights[:, :4]),
    }


def toy_transitions(seed: int = 0, count: int = 4) -> Tuple[GraphGame, List[Transition]]:
    """Random-play transitions of 2 pursuers on a 6-node ring."""
    game = GraphGame(ScenarioConfig(scenario=Scenario.PURSUIT, team_size=2, max_steps=8), generate_map("ring", 6))
    rng = np.random.default_rng(seed)
    transitions: List[Transition] = []
    state = game.reset(seed)
    while len(transitions) < count:
        if state.terminal:
            state = game.reset(int(rng.integers(2**31)))
        ours = random_team_actions(game, state, Team.OURS, rng)
        result = game.step(state, ours, random_team_actions(game, state, Team.OPPONENT, rng))
        transitions.append(Transition(state, tuple(ours), result.reward, result.state, result.terminal))
        state = result.state
    return game, transitions


class GradcheckReport(NamedTuple):
    errors: Dict[str, float]   # max relative error per primitive or loss
    draws: Dict[str, int]      # independent draws behind each maximum


def run_gradcheck(seed: int = 0, draws: int = 100, coords_per_array: int = 2, eps: float = 1e-5) -> GradcheckReport:
    """
    Max relative finite-difference error per primitive and per loss. Every draw
    uses fresh inputs; for the losses that means new parameters and new random-play
    transitions of a 6-node toy problem.
    """
    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    counts: Dict[str, int] = {}

    def record(name: str, err: float) -> None:
        errors[name] = max(errors.get(name, 0.0), err)
        counts[name] = counts.get(name, 0) + 1

    for _ in tqdm(range(draws), desc="gradcheck primitives"):
        for name, f in _primitive_checks(rng).items():
            record(name, ad.grad_check(f, rng.normal(size=(3, 4)), eps))

    for _ in tqdm(range(draws), desc="gradcheck losses"):
        game, transitions = toy_transitions(int(rng.integers(2**31)))
        net_cfg = NetworkConfig(feature_width=game.cfg.feature_width, d_model=8, encoder_layers=1,
                                attention_heads=2, critic_hidden=8)
        net = PolicyNetwork(net_cfg)
        params = ParameterSet.initialize(net_cfg, rng)
        targets = ParameterSet.initialize(net_cfg, rng).subset(CRITICS)
        batch = TransitionBatch.build(game, transitions, with_reference=True)
        coeffs = Coefficients(log_alpha=float(rng.normal(-1.5, 0.5)), log_beta=float(rng.normal(0.0, 0.5)),
                              gamma=0.99)
        next_actions = rng.integers(0, batch.following.candidate_counts)

        losses = {
            "policy_loss": (["actor"], lambda p: policy_loss(net, p, params.arrays, batch.current, coeffs).loss),
            "critic_loss": (list(CRITICS), lambda p: critic_loss(net, p, targets.arrays, batch, coeffs,
                                                                 next_action_index=next_actions).total),
            "bc_loss": (["actor"], lambda p: bc_loss(net, p, batch.current)),
        }
        for name, (owners, loss_fn) in losses.items():
            trainable = params.subset(owners)
            fixed = {n: a for n, a in params.items() if n not in trainable}

            def wrapped(tensors, loss_fn=loss_fn, fixed=fixed):
                return loss_fn({**fixed, **tensors})

            per_array = ad.grad_check_parameters(wrapped, trainable.arrays, eps, coords_per_array, rng, kink_tol=1e-4)
            record(name, max(per_array.values()))
    for name, err in errors.items():
        logger.info(f"gradcheck {name}: max relative error {err:.3e} over {counts[name]} draws")
    return GradcheckReport(errors, counts)
