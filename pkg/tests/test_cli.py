"""Tests for the command line interface."""

import json

import pytest
from typer.testing import CliRunner

from raca.config.manager import ConfigManager, RunConfig
from raca.main import app

runner = CliRunner()


@pytest.fixture
def tiny_run(tmp_path):
    """A run config and arena small enough to train in a few seconds."""
    duel = ConfigManager().resolve_arena("1v1_duel").to_dict()
    duel.update(name="short_duel", max_steps=5)
    (tmp_path / "short_duel.json").write_text(json.dumps(duel))
    (tmp_path / "run.yaml").write_text(
        "\n".join(
            [
                "arena: short_duel.json",
                "d_k: 8",
                "d_h: 8",
                "d_mix: 4",
                "d_gcn: 4",
                "action_slots: 4",
                "batch_size: 2",
                "buffer_size: 8",
                "target_interval: 2",
                "total_steps: 20",
                "eval_interval: 10",
                "eval_episodes: 2",
                "epsilon_anneal_steps: 20",
                "checkpoint_interval: 10",
            ]
        )
    )
    return tmp_path


def test_config_show_prints_defaults():
    result = runner.invoke(app, ["config", "--show"])
    assert result.exit_code == 0
    assert RunConfig.from_dict(json.loads(result.stdout)) == RunConfig()


def test_config_lists_arenas():
    result = runner.invoke(app, ["config", "--arenas"])
    assert result.exit_code == 0
    assert "3v3_rangers" in result.stdout.split()


def test_print_config_applies_overrides(tiny_run):
    result = runner.invoke(
        app, ["train", "-c", str(tiny_run / "run.yaml"), "--seed", "4", "--variant", "qmix", "--print-config"]
    )
    assert result.exit_code == 0
    shown = json.loads(result.stdout)
    assert shown["seed"] == 4 and shown["variant"] == "qmix" and shown["d_k"] == 8
    assert not (tiny_run / "runs").exists()


def test_invalid_option_value_exits_with_usage_code():
    result = runner.invoke(app, ["train", "--variant", "coma", "--print-config"])
    assert result.exit_code == 2


def test_missing_checkpoint_exits_with_usage_code(tmp_path):
    result = runner.invoke(app, ["eval", "-k", str(tmp_path / "absent.ckpt")])
    assert result.exit_code == 2
    result = runner.invoke(app, ["transfer-eval", "-k", str(tmp_path / "absent.ckpt"), "-a", "3v3_rangers"])
    assert result.exit_code == 2


def test_baseline_eval_needs_arena():
    assert runner.invoke(app, ["eval", "--policy", "random"]).exit_code == 2
    result = runner.invoke(app, ["eval", "--policy", "random", "-a", "1v1_duel", "-n", "2"])
    assert result.exit_code == 0
    assert "Win rate" in result.stdout


def test_selftest_single_suite():
    result = runner.invoke(app, ["selftest", "--suite", "adjacency"])
    assert result.exit_code == 0
    assert "checks passed" in result.stdout


def test_selftest_unknown_suite():
    assert runner.invoke(app, ["selftest", "--suite", "vibes"]).exit_code == 2


def test_train_eval_and_transfer_eval(tiny_run):
    out = tiny_run / "runs" / "tiny"
    result = runner.invoke(app, ["train", "-c", str(tiny_run / "run.yaml"), "-o", str(out)])
    assert result.exit_code == 0, result.stdout
    for name in ("metrics.csv", "final.ckpt", "train.log", "arena.json"):
        assert (out / name).exists(), name

    result = runner.invoke(app, ["eval", "-k", str(out / "final.ckpt"), "-n", "2"])
    assert result.exit_code == 0, result.stdout
    assert "Arena: short_duel" in result.stdout

    result = runner.invoke(app, ["transfer-eval", "-k", str(out / "final.ckpt"), "-a", "3v3_rangers", "-n", "2"])
    assert result.exit_code == 0, result.stdout
    assert "3v3_rangers: win rate" in result.stdout
