import pytest

from errors import ConfigError
from main import load_run_config, main, parse_overrides


def test_parse_overrides():
    assert parse_overrides(["mode=BRAC", " seed = 4 "]) == {"mode": "BRAC", "seed": "4"}
    assert parse_overrides(None) == {}
    with pytest.raises(ConfigError):
        parse_overrides(["mode"])
    with pytest.raises(ConfigError):
        parse_overrides(["=3"])


def test_overrides_win_over_the_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("# comment\nmode=BRAC\nseed=3\n", encoding="utf-8")
    cfg = load_run_config(str(path), {"seed": "5"})
    assert cfg.mode.value == "BRAC"
    assert cfg.seed == 5


def test_bad_configs_raise_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "missing.conf"))
    with pytest.raises(ConfigError, match="learning_rat"):
        load_run_config(None, {"learning_rat": "0.1"})
    with pytest.raises(ConfigError):
        load_run_config(None, {"batch_size": "-1"})


def test_unknown_key_exits_nonzero(tmp_path):
    assert main(["--log_file", str(tmp_path / "log.txt"), "train", "--set", "bogus=1"]) == 1
    assert "bogus" in (tmp_path / "log.txt").read_text(encoding="utf-8")


def test_failed_run_writes_error_report(tmp_path):
    run_dir = tmp_path / "run"
    code = main(["--log_file", str(tmp_path / "log.txt"), "eval", "--set", f"output_dir={run_dir}"])
    assert code == 1
    assert "ConfigError" in (run_dir / "error.txt").read_text(encoding="utf-8")


def test_genmap_writes_a_map(tmp_path):
    out = tmp_path / "maps" / "grid.txt"
    assert main(["--log_file", str(tmp_path / "log.txt"), "genmap", "--kind", "grid", "--size", "3",
                 "--out", str(out)]) == 0
    assert out.is_file()


def test_verify_theorems_passes(tmp_path, capsys):
    out = tmp_path / "certificate.txt"
    assert main(["--log_file", str(tmp_path / "log.txt"), "verify-theorems", "--instances", "3",
                 "--out", str(out)]) == 0
    assert "Overall: PASS" in out.read_text(encoding="utf-8")
    assert "Overall: PASS" in capsys.readouterr().out
