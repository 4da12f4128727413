"""Exercises every subcommand of the command-line front end in-process."""

import csv
import os

import pytest
import yaml

from mfvuln.cli import build_parser, main
from mfvuln.pipeline import ResultsLedger, RunPaths


def write_config(tmp_path, **overrides):
    raw = {
        "name": "cli-toy",
        "env": {"env_name": "toy", "n_agents": 5, "block_states": 2,
                "n_actions": 2, "horizon": 6, "seed": 0},
        "victim": {"episodes": 120, "eval_episodes": 6},
        "value": {"rollouts": 8, "sweeps": 60},
        "selection": {"methods": ["greedy", "random"], "k": 2},
        "adversary": {"episodes": 6, "eval_episodes": 3},
        "correlation": {"n_subsets": 10, "episodes": 2, "adv_episodes": 2},
        "seeds": [0],
        "out_dir": str(tmp_path / "runs"),
    }
    raw.update(overrides)
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path, raw


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["no-such-command", "--config", "x"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["heatmap", "--config", "x", "--mode", "bogus"])


def test_staged_commands_chain_into_a_full_run(tmp_path, capsys):
    cfg_path, raw = write_config(tmp_path)
    paths = RunPaths(raw["out_dir"])

    assert main(["train-victim", "--config", str(cfg_path)]) == 0
    assert os.path.exists(paths.victim_policy(0))
    assert "victim ready" in capsys.readouterr().out

    assert main(["fit-value", "--config", str(cfg_path)]) == 0
    assert os.path.exists(paths.value_model(0))
    capsys.readouterr()

    assert main(["select", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "greedy" in out and "random" in out
    assert os.path.exists(paths.attack_set(0, "greedy"))

    assert main(["attack", "--config", str(cfg_path)]) == 0
    assert os.path.exists(paths.adversary(0, "random"))
    capsys.readouterr()

    assert main(["evaluate", "--config", str(cfg_path)]) == 0
    ledger = ResultsLedger(paths.ledger())
    assert ledger.has(experiment_of(ledger), "attack", seed=0, method="greedy")
    capsys.readouterr()

    assert main(["heatmap", "--config", str(cfg_path),
                 "--mode", "single-adversary-xi"]) == 0
    heat = paths.heatmap(0, "single-adversary-xi")
    assert os.path.exists(heat)
    cells = [v for row in csv.reader(open(heat)) for v in row]
    assert len(cells) == 5

    assert main(["correlate", "--config", str(cfg_path)]) == 0
    assert os.path.exists(paths.correlation(0))
    assert ledger.has(experiment_of(ledger), "correlate", seed=0)
    assert "pearson r" in capsys.readouterr().out


def experiment_of(ledger) -> str:
    rows = ledger.rows()
    assert rows, "expected ledger rows"
    return rows[0]["experiment_id"]


def test_pipeline_command_runs_everything(tmp_path, capsys):
    cfg_path, raw = write_config(tmp_path)
    assert main(["pipeline", "--config", str(cfg_path)]) == 0
    assert "pipeline complete" in capsys.readouterr().out
    paths = RunPaths(raw["out_dir"])
    for artifact in [paths.victim_policy(0), paths.value_model(0),
                     paths.attack_set(0, "greedy"), paths.adversary(0, "greedy")]:
        assert os.path.exists(artifact)


def test_seed_and_out_overrides(tmp_path):
    cfg_path, raw = write_config(tmp_path)
    other = tmp_path / "elsewhere"
    assert main(["train-victim", "--config", str(cfg_path),
                 "--seed", "1", "--out", str(other)]) == 0
    paths = RunPaths(str(other))
    assert os.path.exists(paths.victim_policy(1))
    assert not os.path.exists(paths.victim_policy(0))
    assert not os.path.exists(RunPaths(raw["out_dir"]).victim_policy(1))


def test_missing_dependency_exits_with_error(tmp_path, capsys):
    cfg_path, _ = write_config(tmp_path)
    code = main(["select", "--config", str(cfg_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "train-victim" in err


def test_bad_config_exits_with_error(tmp_path, capsys):
    cfg_path, _ = write_config(
        tmp_path, selection={"methods": ["greedy"], "k": 9})
    assert main(["pipeline", "--config", str(cfg_path)]) == 2
    assert "exceeds population" in capsys.readouterr().err
