# Command-line entry point: train, eval, selfplay, crossmap, genmap, verify-theorems, gradcheck
import argparse
import logging
import os
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import dotenv_values
from pydantic import ValidationError

import experiments
import tabular_verifier
from errors import AracError, ConfigError
from graph_world import write_map
from models import RunConfig

logger = logging.getLogger(__name__)

formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')


def configure_logging(log_file: str = 'arac.log', level: int = logging.INFO) -> None:
    """File and console handlers on the root logger, so every module's logger reports."""
    root = logging.getLogger()
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)

    # File Handler
    Path(log_file).parent.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(level)
    file_handler.setFormatter(formatter)
    root.addHandler(file_handler)

    # Console Handler
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    root.addHandler(console_handler)


def parse_overrides(pairs: Optional[List[str]]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override '{pair}' is not of the form key=value")
        overrides[key.strip()] = value.strip()
    return overrides


def load_run_config(path: Optional[str], overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """Flat key=value file (optional), then overrides, validated into a RunConfig."""
    values: Dict[str, str] = {}
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file {path} not found")
        values.update({k: v for k, v in dotenv_values(path).items() if v not in (None, "")})
    values.update(overrides or {})
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        keys = ", ".join(".".join(str(p) for p in err["loc"]) for err in e.errors())
        raise ConfigError(f"invalid configuration ({keys}): {e}") from e


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='Path to a flat key=value run configuration')
    parser.add_argument('--set', dest='overrides', action='append', metavar='KEY=VALUE',
                        help='Override one configuration key (repeatable)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Regularized multi-agent actor-critic on graph games')
    parser.add_argument('--log_file', default=None, help='Log file (defaults to <output_dir>/run.log for run verbs)')
    parser.add_argument('--verbose', action='store_true', help='Log per-step detail')
    sub = parser.add_subparsers(dest='verb', required=True)

    train = sub.add_parser('train', help='Train one run, or one run per seed with --seeds')
    _add_config_args(train)
    train.add_argument('--seeds', help='Comma-separated seeds; writes summary.csv over the runs')

    ev = sub.add_parser('eval', help='Greedy evaluation of a checkpoint against scripted opponents')
    _add_config_args(ev)
    ev.add_argument('--checkpoint', help='Checkpoint file to evaluate')
    ev.add_argument('--map', dest='map_path', help='Map file (defaults to map_path from the config)')
    ev.add_argument('--episodes', type=int, help='Evaluation episodes (defaults to eval_episodes)')
    ev.add_argument('--seed', type=int, help='Evaluation seed (defaults to seed)')
    ev.add_argument('--reference', action='store_true', help='Evaluate the scripted reference team instead')

    sp = sub.add_parser('selfplay', help='Self-play from start_checkpoint with snapshot refreshes')
    _add_config_args(sp)

    cm = sub.add_parser('crossmap', help='Success matrix of checkpoints evaluated on maps')
    _add_config_args(cm)
    cm.add_argument('--checkpoints', required=True, help='Comma-separated checkpoints, one per training map')
    cm.add_argument('--maps', required=True, help='Comma-separated test maps')
    cm.add_argument('--out', default='crossmap.csv', help='Output CSV')

    gm = sub.add_parser('genmap', help='Generate a connected map file')
    gm.add_argument('--kind', choices=['grid', 'ring', 'tree', 'random'], required=True)
    gm.add_argument('--size', type=int, required=True, help='Node count (side length for grid)')
    gm.add_argument('--seed', type=int, default=0)
    gm.add_argument('--edge_prob', type=float, default=0.1, help='Extra-edge probability for random maps')
    gm.add_argument('--out', required=True, help='Output map file')

    vt = sub.add_parser('verify-theorems', help='Certify contraction and improvement on random tabular MDPs')
    vt.add_argument('--instances', type=int, default=50)
    vt.add_argument('--seed', type=int, default=0)
    vt.add_argument('--gamma', type=float, default=0.9)
    vt.add_argument('--alpha', type=float, default=0.3)
    vt.add_argument('--beta', type=float, default=0.5)
    vt.add_argument('--max_states', type=int, default=6)
    vt.add_argument('--max_actions', type=int, default=4)
    vt.add_argument('--out', default='certificate.txt', help='Report file')

    gc = sub.add_parser('gradcheck', help='Finite-difference check of every primitive and loss')
    gc.add_argument('--seed', type=int, default=0)
    gc.add_argument('--draws', type=int, default=100)
    gc.add_argument('--tolerance', type=float, default=1e-4)
    return parser


def run_verb(args: argparse.Namespace) -> int:
    """Executes one verb; returns the process exit status."""
    if args.verb == 'train':
        cfg = load_run_config(args.config, parse_overrides(args.overrides))
        if args.seeds:
            rows = experiments.run_seeds(cfg, [int(s) for s in args.seeds.split(',')])
            for row in rows:
                print(f"episode {row.episode}: {row.mean:.3f} ± {row.std:.3f} (n={row.n})")
        else:
            result = experiments.run_training(cfg)
            print(f"final success rate {result.final.success_rate:.3f} ({result.run_dir})")
        return 0

    if args.verb == 'eval':
        cfg = load_run_config(args.config, parse_overrides(args.overrides))
        report = experiments.evaluate(cfg, checkpoint=args.checkpoint, map_path=args.map_path,
                                      episodes=args.episodes, seed=args.seed, use_reference=args.reference)
        experiments.ReportWriter(cfg.output_dir).write_report(
            'eval_report.txt.j2', filename='eval_report.txt', report=report, checkpoint=args.checkpoint)
        print(f"success rate {report.success_rate:.3f} ({report.successes}/{report.episodes})")
        return 0

    if args.verb == 'selfplay':
        cfg = load_run_config(args.config, parse_overrides(args.overrides))
        report = experiments.self_play(cfg)
        print("score vs start: " + ", ".join(f"{w:.3f}" for w in report.curve))
        return 0

    if args.verb == 'crossmap':
        cfg = load_run_config(args.config, parse_overrides(args.overrides))
        matrix = experiments.cross_map(cfg, args.checkpoints.split(','), args.maps.split(','), args.out)
        for row in matrix:
            print(" ".join(f"{v:.3f}" for v in row))
        return 0

    if args.verb == 'genmap':
        graph = experiments.generate_map(args.kind, args.size, args.seed, args.edge_prob)
        write_map(graph, args.out)
        print(f"{args.out}: {graph.node_count} nodes, {len(graph.edges)} edges")
        return 0

    if args.verb == 'verify-theorems':
        report = tabular_verifier.certify(args.instances, args.seed, args.gamma, args.alpha, args.beta,
                                          args.max_states, args.max_actions)
        text = tabular_verifier.render_certificate(report)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding='utf-8')
        print(text)
        return 0 if report.passed else 1

    if args.verb == 'gradcheck':
        report = experiments.run_gradcheck(args.seed, args.draws)
        for name, err in report.errors.items():
            print(f"{name:20s} {err:.3e} {report.draws[name]:5d} draws {'ok' if err < args.tolerance else 'FAIL'}")
        return 0 if max(report.errors.values()) < args.tolerance else 1

    raise ConfigError(f"unknown verb {args.verb}")


def _run_dir_for(args: argparse.Namespace) -> Optional[str]:
    if args.verb not in ('train', 'eval', 'selfplay', 'crossmap'):
        return None
    try:
        return load_run_config(args.config, parse_overrides(args.overrides)).output_dir
    except ConfigError:
        return None


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    run_dir = _run_dir_for(args)
    log_file = args.log_file or (os.path.join(run_dir, 'run.log') if run_dir else 'arac.log')
    configure_logging(log_file, logging.DEBUG if args.verbose else logging.INFO)

    try:
        return run_verb(args)
    except Exception as e:
        stack_trace = traceback.format_exc()
        if isinstance(e, AracError):
            error_msg = f"{type(e).__name__}: {e}"
        else:
            error_msg = f"Unexpected error: {str(e)}"
        logger.error(f"{error_msg}\n{stack_trace}")
        if run_dir:
            experiments.ReportWriter(run_dir).write_error_report(error_msg, stack_trace)
        return 1


if __name__ == "__main__":
    sys.exit(main())
