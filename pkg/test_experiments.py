import csv
import json
import math

import networkx as nx
import numpy as np
import pytest

from errors import ConfigError, IncompatibleCheckpoint, ScenarioMismatch
from experiments import (ReportWriter, cross_map, episode_seeds, evaluate, generate_map, run_gradcheck, run_seeds,
                         run_training, self_play)
from graph_world import all_pairs_shortest_paths, write_map
from models import METRICS_COLUMNS, RunConfig


def tiny_config(tmp_path, map_path, **overrides):
    values = dict(
        scenario="pursuit", map_path=str(map_path), max_steps=10, mode="ARAC",
        batch_size=4, buffer_size=50, learning_rate=1e-3,
        encoder_layers=1, attention_heads=2, d_model=8, critic_hidden=8,
        episodes=3, eval_every=1, eval_episodes=3, seed=1,
        output_dir=str(tmp_path / "run"), progress=False,
    )
    values.update(overrides)
    return RunConfig.model_validate(values)


@pytest.fixture
def ring_map(tmp_path):
    path = tmp_path / "maps" / "ring8.txt"
    write_map(generate_map("ring", 8), path)
    return path


@pytest.fixture
def tree_map(tmp_path):
    path = tmp_path / "maps" / "tree15.txt"
    write_map(generate_map("tree", 15, seed=4), path)
    return path


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# map generation

def test_grid_map_counts():
    g = generate_map("grid", 4)
    assert g.node_count == 16
    assert len(g.edges) == 24


def test_ring_map_counts():
    g = generate_map("ring", 5)
    assert (g.node_count, len(g.edges)) == (5, 5)
    assert all_pairs_shortest_paths(g).diameter == 2


@pytest.mark.parametrize("kind", ["tree", "random"])
def test_generated_maps_are_connected_and_seeded(kind):
    g = generate_map(kind, 30, seed=3)
    nxg = nx.Graph(list(g.edges))
    nxg.add_nodes_from(range(g.node_count))
    assert nx.is_connected(nxg)
    assert generate_map(kind, 30, seed=3) == g
    if kind == "tree":
        assert len(g.edges) == 29


def test_bad_map_requests():
    with pytest.raises(ConfigError):
        generate_map("hexagon", 5)
    with pytest.raises(ConfigError):
        generate_map("ring", 1)


def test_episode_seed_streams():
    assert episode_seeds(3, 5) == episode_seeds(3, 5)
    assert episode_seeds(3, 5, stream=0) != episode_seeds(3, 5, stream=1)
    assert episode_seeds(3, 0) == []


# evaluation

def test_reference_chase_always_wins_on_trees(tmp_path, tree_map):
    cfg = tiny_config(tmp_path, tree_map, max_steps=128, eval_episodes=20)
    report = evaluate(cfg, use_reference=True)
    assert report.success_rate == 1.0
    assert report.episodes == 20 and len(report.outcomes) == 20


def test_evaluation_requires_a_checkpoint(tmp_path, tree_map):
    with pytest.raises(ConfigError):
        evaluate(tiny_config(tmp_path, tree_map))


def test_parallel_evaluation_matches_serial(tmp_path, ring_map):
    serial = evaluate(tiny_config(tmp_path, ring_map), use_reference=True)
    parallel = evaluate(tiny_config(tmp_path, ring_map, workers=3), use_reference=True)
    assert serial == parallel


# training runs

def test_training_writes_a_complete_run_directory(tmp_path, ring_map):
    result = run_training(tiny_config(tmp_path, ring_map))
    run_dir = result.run_dir
    for name in ("config.conf", "map.txt", "metrics.csv", "final.ckpt", "best.ckpt", "report.txt"):
        assert (run_dir / name).is_file(), name
    with open(run_dir / "metrics.csv", newline="", encoding="utf-8") as f:
        assert next(csv.reader(f)) == METRICS_COLUMNS
    assert [episode for episode, _ in result.curve] == [1, 2, 3]
    assert result.train_steps > 0
    assert 0.0 <= result.final.success_rate <= 1.0


def test_updates_run_every_update_every_steps(tmp_path, ring_map):
    result = run_training(tiny_config(tmp_path, ring_map, update_every=5, episodes=6))
    updates = [row for row in read_rows(result.run_dir / "metrics.csv") if row["success_rate_eval"] == ""]
    assert len(updates) == result.train_steps > 0
    assert all(int(row["step"]) % 5 == 0 for row in updates)


def test_same_seed_reproduces_metrics_and_checkpoints(tmp_path, ring_map):
    a = run_training(tiny_config(tmp_path, ring_map, output_dir=str(tmp_path / "a")))
    b = run_training(tiny_config(tmp_path, ring_map, output_dir=str(tmp_path / "b")))
    assert (a.run_dir / "metrics.csv").read_bytes() == (b.run_dir / "metrics.csv").read_bytes()
    assert (a.run_dir / "final.ckpt").read_bytes() == (b.run_dir / "final.ckpt").read_bytes()


def test_dual_steps_follow_the_constraint_signs(tmp_path, ring_map):
    cfg = tiny_config(tmp_path, ring_map, coef_learning_rate=0.05)
    rows = [r for r in read_rows(run_training(cfg).run_dir / "metrics.csv") if r["kl"]]
    assert rows
    alpha, beta = cfg.init_alpha, cfg.init_beta
    for row in rows:
        new_alpha, new_beta = float(row["alpha"]), float(row["beta"])
        entropy, target = float(row["entropy"]), float(row["target_entropy"])
        assert np.sign(new_alpha - alpha) == np.sign(target - entropy)
        assert np.sign(new_beta - beta) == np.sign(float(row["kl"]) - cfg.target_kl)
        alpha, beta = new_alpha, new_beta


def test_brac_beta_column_is_constant(tmp_path, ring_map):
    rows = read_rows(run_training(tiny_config(tmp_path, ring_map, mode="BRAC", init_beta=0.5)).run_dir
                     / "metrics.csv")
    betas = {r["beta"] for r in rows if r["beta"]}
    assert len(betas) == 1
    assert math.isclose(float(betas.pop()), 0.5)


def test_reference_run_has_a_fixed_success_rate(tmp_path, ring_map):
    result = run_training(tiny_config(tmp_path, ring_map, mode="REF", max_steps=30))
    rates = {rate for _, rate in result.curve}
    assert len(rates) == 1
    assert result.train_steps == 0


def test_checkpoint_evaluation_is_reproducible(tmp_path, ring_map):
    cfg = tiny_config(tmp_path, ring_map)
    ckpt = str(run_training(cfg).run_dir / "final.ckpt")
    first = evaluate(cfg, checkpoint=ckpt, episodes=4, seed=2)
    assert first == evaluate(cfg, checkpoint=ckpt, episodes=4, seed=2)
    assert first.success_rate == first.successes / 4

    other = tiny_config(tmp_path, ring_map, d_model=4)
    with pytest.raises(IncompatibleCheckpoint):
        evaluate(other, checkpoint=ckpt)


def test_cross_map_matrix(tmp_path, ring_map, tree_map):
    cfg = tiny_config(tmp_path, ring_map, episodes=1)
    ckpt = str(run_training(cfg).run_dir / "final.ckpt")
    out = tmp_path / "crossmap.csv"
    matrix = cross_map(cfg, [ckpt], [str(ring_map), str(tree_map)], out)
    assert matrix.shape == (2, 1)
    assert matrix[0, 0] == evaluate(cfg, checkpoint=ckpt, map_path=str(ring_map)).success_rate
    with open(out, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["test_map", "final"]
    assert [r[0] for r in rows[1:]] == ["ring8", "tree15"]


def test_multi_seed_summary(tmp_path, ring_map):
    cfg = tiny_config(tmp_path, ring_map, episodes=2, eval_every=2)
    rows = run_seeds(cfg, [0, 1])
    assert [r.episode for r in rows] == [2]
    assert rows[0].n == 2
    assert (tmp_path / "run" / "seed_0" / "metrics.csv").is_file()
    assert read_rows(tmp_path / "run" / "summary.csv")[0]["n"] == "2"


# self-play

def test_self_play_snapshots_and_accounting(tmp_path):
    map_path = tmp_path / "grid3.txt"
    write_map(generate_map("grid", 3), map_path)
    cfg = tiny_config(tmp_path, map_path, scenario="confrontation", selfplay_episodes=2, snapshot_every=1,
                      selfplay_eval_episodes=3, max_steps=8)
    report = self_play(cfg)
    assert report.snapshot_episodes == [0, 1, 2]
    assert len(report.curve) == 3
    assert all(0.0 <= c <= 1.0 and c * 6 == pytest.approx(round(c * 6)) for c in report.curve)
    k = len(report.snapshot_episodes)
    for i in range(k):
        for j in range(k):
            assert report.wins[i][j] + report.draws[i][j] + report.losses[i][j] == 3
            assert report.wins[i][j] + report.wins[j][i] + report.draws[i][j] == 3 or i == j
    saved = json.loads((tmp_path / "run" / "selfplay.json").read_text(encoding="utf-8"))
    assert saved["snapshot_episodes"] == [0, 1, 2]


def test_self_play_needs_confrontation(tmp_path, ring_map):
    with pytest.raises(ScenarioMismatch):
        self_play(tiny_config(tmp_path, ring_map))


# reports and checks

def test_error_report(tmp_path):
    path = ReportWriter(tmp_path / "failed").write_error_report("ConfigError: bad key", "Traceback ...")
    text = path.read_text(encoding="utf-8")
    assert path.name == "error.txt"
    assert "ConfigError: bad key" in text and "Traceback" in text


def test_gradcheck_covers_primitives_and_losses():
    report = run_gradcheck(seed=0, draws=3)
    for name in ("matmul", "masked_softmax", "layer_norm", "masked_attention", "policy_loss", "critic_loss",
                 "bc_loss"):
        assert name in report.errors
        assert report.draws[name] == 3
    assert max(report.errors.values()) < 1e-4
