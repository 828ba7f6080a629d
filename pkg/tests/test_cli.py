"""Argument parsing, config precedence, and exit codes for the console entry point."""

import json

import numpy as np
import pytest

from stainkit.cli import SEED_ENV_VAR, build_parser, main, resolve_config
from stainkit.pipeline import write_image
from synth import domain_a_tile


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)


@pytest.fixture()
def tile_dir(tmp_path):
    rng = np.random.default_rng(3)
    d = tmp_path / "tiles"
    d.mkdir()
    for i in range(3):
        write_image(d / f"tile_{i}.png", domain_a_tile(rng, 16))
    return d


def parse(*argv):
    return build_parser().parse_args(list(argv))


# --- precedence -------------------------------------------------------------------


def test_defaults_without_config(tile_dir):
    cfg = resolve_config(parse("normalize", "--input-dir", str(tile_dir)))
    assert cfg.seed == 0
    assert cfg.method == "model"
    assert cfg.input_dir == str(tile_dir)


def test_config_file_sets_values(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 5, "method": "reinhard", "threads": 3}))
    cfg = resolve_config(parse("normalize", "--config", str(path)))
    assert (cfg.seed, cfg.method, cfg.threads) == (5, "reinhard", 3)


def test_env_seed_overrides_config_file(tmp_path, monkeypatch):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 5}))
    monkeypatch.setenv(SEED_ENV_VAR, "9")
    cfg = resolve_config(parse("normalize", "--config", str(path)))
    assert cfg.seed == 9


def test_flag_overrides_env_and_config(tmp_path, monkeypatch):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 5}))
    monkeypatch.setenv(SEED_ENV_VAR, "9")
    cfg = resolve_config(parse("normalize", "--config", str(path), "--seed", "12"))
    assert cfg.seed == 12


def test_env_seed_must_be_integer(tile_dir, monkeypatch, capsys):
    monkeypatch.setenv(SEED_ENV_VAR, "twelve")
    code = main(["select-template", "--input-dir", str(tile_dir)])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_train_flags_route_into_train_config():
    cfg = resolve_config(parse("train", "--steps", "7", "--learning-rate", "0.002"))
    assert cfg.train.steps == 7
    assert cfg.train.learning_rate == 0.002
    assert cfg.train.beta1 == 0.9


def test_flags_override_nested_config_values(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train": {"steps": 100, "learning_rate": 0.5}}))
    cfg = resolve_config(parse("train", "--config", str(path), "--steps", "7"))
    assert cfg.train.steps == 7
    assert cfg.train.learning_rate == 0.5


def test_histogram_bins_flag(tile_dir):
    cfg = resolve_config(parse("select-template", "--input-dir", str(tile_dir),
                               "--histogram-bins", "64"))
    assert cfg.histogram_bins == 64


# --- parser surface ---------------------------------------------------------------


def test_method_choices_enforced():
    with pytest.raises(SystemExit):
        parse("normalize", "--method", "cyclegan")


def test_edge_policy_choices_enforced():
    with pytest.raises(SystemExit):
        parse("tile", "--edge-policy", "pad")


def test_subcommand_required():
    with pytest.raises(SystemExit):
        parse()


# --- end to end through main ------------------------------------------------------


def test_select_template_prints_choice(tile_dir, tmp_path, capsys):
    code = main(["select-template", "--input-dir", str(tile_dir),
                 "--output-dir", str(tmp_path / "out")])
    assert code == 0
    printed = capsys.readouterr().out.strip()
    assert printed.endswith(".png")
    assert (tile_dir / printed.split("/")[-1]).is_file()


def test_unknown_config_key_is_hard_error(tile_dir, tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"tile_szie": 128}))
    code = main(["tile", "--config", str(path), "--input-dir", str(tile_dir),
                 "--output-dir", str(tmp_path / "out")])
    assert code == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_empty_input_dir_is_hard_error(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code = main(["select-template", "--input-dir", str(tmp_path / "empty"),
                 "--output-dir", str(tmp_path / "out")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_partial_failure_exit_code(tile_dir, tmp_path):
    (tile_dir / "bad.png").write_bytes(b"junk")
    template = tile_dir / "tile_0.png"
    code = main(["normalize", "--input-dir", str(tile_dir),
                 "--output-dir", str(tmp_path / "out"),
                 "--method", "reinhard", "--template", str(template)])
    assert code == 2


def test_seed_lands_in_manifest(tile_dir, tmp_path):
    out = tmp_path / "out"
    code = main(["select-template", "--input-dir", str(tile_dir),
                 "--output-dir", str(out), "--seed", "42"])
    assert code == 0
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["seed"] == 42
    assert doc["config"]["seed"] == 42
