from __future__ import annotations

import csv
import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from reachbudget import approx, cli, rcppo
from reachbudget.cli import LOG_COLUMNS

TINY = {
    "train": {
        "total_steps": 300,
        "n_envs": 2,
        "epochs": 1,
        "minibatch_size": 64,
        "hidden": [8, 8],
        "z_max": 100.0,
    },
    "phase2": {
        "total_steps": 200,
        "n_envs": 2,
        "epochs": 1,
        "minibatch_size": 64,
    },
    "baseline": {
        "total_steps": 300,
        "n_envs": 2,
        "epochs": 1,
        "minibatch_size": 64,
        "hidden": [8, 8],
    },
    "grid_search": {
        "r_goal": [10.0],
        "p_goal": [0.0],
        "beta": [0.1],
        "n_eval_episodes": 2,
    },
    "eval": {"n_episodes": 2},
}


def _invoke(args):
    result = CliRunner().invoke(cli.main, args)
    assert result.exit_code == 0, result.output
    return result


def _last_json(result) -> dict:
    return json.loads(result.output.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


@pytest.fixture(scope="module")
def rcppo_run(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "rcppo"
    _invoke(["train", "--config", tiny_cfg, "--out", str(out)])
    return str(out)


@pytest.fixture(scope="module")
def baseline_run(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "baseline"
    _invoke(["train", "--config", tiny_cfg, "--out", str(out), "--algorithm", "baseline"])
    return str(out)


def _write_linear_value(path: str, z_coef: float, bias: float, z_max: float = 100.0):
    """Save a one-layer value net whose scaled output is bias + z_coef * z/z_max."""
    params = approx.mlp_init((4, 1), np.random.default_rng(0), activation="identity")
    params.weights[0][:] = 0.0
    params.weights[0][3, 0] = z_coef
    params.biases[0][:] = bias
    meta = {
        "algorithm": "rcppo",
        "obs_scale": [float(np.pi), 8.0],
        "z_min": -1.0,
        "z_max": z_max,
        "big_c": 987.0,
    }
    approx.save_checkpoint(path, approx.mlp_to_arrays("value", params), meta)


# the value nets see z normalized to (z - z_min) / (z_max - z_min), so a
# scaled output of 0.5 - z_norm crosses zero halfway through [-1, 100]
HALFWAY_Z = 49.5


@pytest.fixture(scope="module")
def halfway_value(tmp_path_factory):
    path = tmp_path_factory.mktemp("val") / "value.ckpt"
    _write_linear_value(str(path), z_coef=-1.0, bias=0.5)
    return str(path)


@pytest.fixture(scope="module")
def hopeless_value(tmp_path_factory):
    # positive at every budget, so every state is infeasible
    path = tmp_path_factory.mktemp("val") / "value.ckpt"
    _write_linear_value(str(path), z_coef=0.0, bias=0.1)
    return str(path)


def test_train_writes_checkpoints_log_and_config(rcppo_run, tmp_path):
    policy, meta = cli._load_policy(f"{rcppo_run}/policy.ckpt")
    assert meta["algorithm"] == "rcppo"
    assert meta["z_max"] == 100.0
    assert "config_hash" in meta
    value, vmeta = cli._load_value(f"{rcppo_run}/value.ckpt")
    assert vmeta["config_hash"] == meta["config_hash"]
    with open(f"{rcppo_run}/train_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == LOG_COLUMNS
    assert len(rows) >= 2
    with open(f"{rcppo_run}/config.json") as fh:
        blob = json.load(fh)
    assert blob["hash"] == meta["config_hash"]
    assert blob["config"]["train"]["total_steps"] == 300


def test_train_echoes_resolved_config_and_hash(tiny_cfg, tmp_path):
    out = tmp_path / "echo"
    result = _invoke(["train", "--config", tiny_cfg, "--out", str(out)])
    assert "config_hash: " in result.output
    assert "total_steps: 300" in result.output
    assert "trained rcppo" in result.output


def test_train_baseline_algorithm_is_not_budget_conditioned(baseline_run):
    policy, meta = cli._load_policy(f"{baseline_run}/policy.ckpt")
    assert meta["algorithm"] == "ppo_lagrangian"
    # raw state in, no budget channel
    assert policy.trunk.weights[0].shape[0] == 2


def test_finetune_writes_second_stage_value(tiny_cfg, rcppo_run, tmp_path):
    out = tmp_path / "p2"
    result = _invoke(["finetune", "--config", tiny_cfg, "--run", rcppo_run, "--out", str(out)])
    assert "fine-tuned value" in result.output
    value2, meta2 = cli._load_value(f"{out}/value_phase2.ckpt")
    assert 0.0 < meta2["phase2_gamma"] < 1.0
    with open(f"{out}/finetune_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == LOG_COLUMNS


def test_finetune_refuses_baseline_checkpoints(tiny_cfg, baseline_run, tmp_path):
    result = CliRunner().invoke(
        cli.main,
        ["finetune", "--config", tiny_cfg, "--run", baseline_run, "--out", str(tmp_path / "x")],
    )
    assert result.exit_code != 0
    assert "budget-conditioned checkpoints only" in result.output


def test_bisect_reports_the_zero_crossing(halfway_value):
    result = _invoke([
        "bisect", "--value", halfway_value, "--state", "1.0,0.0", "--tol", "1e-3",
    ])
    report = _last_json(result)
    assert report["z_star"] == pytest.approx(HALFWAY_Z, abs=1e-2)
    assert report["v_at_zstar"] <= 0.0
    assert report["monotone_violations"] == 0
    assert report["iterations"] > 0
    lo, hi = report["bracket"]
    assert lo <= report["z_star"] <= hi


def test_bisect_exits_2_when_no_budget_is_feasible(hopeless_value):
    result = CliRunner().invoke(
        cli.main, ["bisect", "--value", hopeless_value, "--state", "1.0,0.0"]
    )
    assert result.exit_code == 2
    report = _last_json(result)
    assert report["infeasible"] is True
    assert "detail" in report


def test_bisect_rejects_malformed_states(halfway_value):
    result = CliRunner().invoke(
        cli.main, ["bisect", "--value", halfway_value, "--state", "1.0"]
    )
    assert result.exit_code != 0
    assert "needs 2 components" in result.output
    result = CliRunner().invoke(
        cli.main, ["bisect", "--value", halfway_value, "--state", "a,b"]
    )
    assert result.exit_code != 0
    assert "bad --state" in result.output


def test_fit_zmap_distills_a_constant_budget_map(halfway_value, tmp_path):
    out = tmp_path / "zmap.ckpt"
    result = _invoke([
        "fit-zmap", "--value", halfway_value, "--out", str(out),
        "--samples", "32", "--seed", "1",
    ])
    assert "holdout MAE" in result.output
    reg = cli._load_regressor(str(out))
    assert reg.n_infeasible == 0
    preds = rcppo.regressor_predict(reg, np.array([[0.5, 0.0], [-2.0, 3.0]]), -1.0)
    assert np.all(np.abs(preds - HALFWAY_Z) < 10.0)


def test_fit_zmap_fails_loudly_when_mostly_infeasible(hopeless_value, tmp_path):
    result = CliRunner().invoke(
        cli.main,
        ["fit-zmap", "--value", hopeless_value, "--out", str(tmp_path / "z.ckpt"),
         "--samples", "16"],
    )
    assert result.exit_code != 0
    assert isinstance(result.exception, RuntimeError)


def test_load_regressor_rejects_other_checkpoints(halfway_value):
    with pytest.raises(Exception, match="not a budget-regressor checkpoint"):
        cli._load_regressor(halfway_value)


def test_deploy_writes_trajectory_csv_with_blank_trailing_action(
    tiny_cfg, rcppo_run, tmp_path
):
    out = tmp_path / "traj.csv"
    result = _invoke([
        "deploy", "--config", tiny_cfg, "--policy", f"{rcppo_run}/policy.ckpt",
        "--state", "2.0,0.0", "--z", "50", "--out", str(out),
    ])
    report = _last_json(result)
    assert report["z0"] == 50.0
    assert report["infeasible_start"] is False
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x0", "x1", "u0", "g", "h", "ghat", "y", "z", "cost"]
    assert len(rows) == report["steps"] + 2
    final = rows[-1]
    assert final[3] == "" and final[9] == ""
    # budgets on successive rows differ by exactly the logged step cost
    z_col, cost_col = 8, 9
    for before, after in zip(rows[1:-1], rows[2:]):
        assert float(after[z_col]) == pytest.approx(
            float(before[z_col]) - float(before[cost_col]), abs=1e-9
        )


def test_deploy_from_a_goal_state_is_a_single_row(tiny_cfg, rcppo_run, tmp_path):
    out = tmp_path / "traj.csv"
    result = _invoke([
        "deploy", "--config", tiny_cfg, "--policy", f"{rcppo_run}/policy.ckpt",
        "--state", "0.01,-1.0", "--z", "50", "--out", str(out),
    ])
    report = _last_json(result)
    assert report["reached"] is True
    assert report["steps"] == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 2


def test_deploy_requires_a_budget_for_conditioned_policies(tiny_cfg, rcppo_run, tmp_path):
    result = CliRunner().invoke(
        cli.main,
        ["deploy", "--config", tiny_cfg, "--policy", f"{rcppo_run}/policy.ckpt",
         "--state", "2.0,0.0", "--out", str(tmp_path / "t.csv")],
    )
    assert result.exit_code != 0
    assert "needs a budget" in result.output


def test_deploy_rejects_two_budget_sources(
    tiny_cfg, rcppo_run, halfway_value, tmp_path
):
    result = CliRunner().invoke(
        cli.main,
        ["deploy", "--config", tiny_cfg, "--policy", f"{rcppo_run}/policy.ckpt",
         "--state", "2.0,0.0", "--z", "50", "--value", halfway_value,
         "--out", str(tmp_path / "t.csv")],
    )
    assert result.exit_code != 0
    assert "at most one" in result.output


def test_deploy_with_value_checkpoint_bisection(tiny_cfg, rcppo_run, halfway_value, tmp_path):
    out = tmp_path / "traj.csv"
    result = _invoke([
        "deploy", "--config", tiny_cfg, "--policy", f"{rcppo_run}/policy.ckpt",
        "--state", "2.0,0.0", "--value", halfway_value, "--tol", "1e-3",
        "--out", str(out),
    ])
    report = _last_json(result)
    assert report["z0"] == pytest.approx(HALFWAY_Z, abs=1e-2)


def test_evaluate_reports_summary_and_full_report(tiny_cfg, rcppo_run, tmp_path):
    out = tmp_path / "report.json"
    result = _invoke([
        "evaluate", "--config", tiny_cfg, "--policy", f"{rcppo_run}/policy.ckpt",
        "--z", "50", "--episodes", "3", "--seed", "7", "--out", str(out),
    ])
    summary = _last_json(result)
    assert summary["n_episodes"] == 3
    assert 0.0 <= summary["reach_rate"] <= 1.0
    assert set(summary) == {
        "n_episodes", "reach_rate", "violation_rate",
        "mean_cost_reached", "median_cost_reached",
    }
    with open(out) as fh:
        full = json.load(fh)
    assert len(full["episodes"]) == 3
    assert full["reach_rate"] == summary["reach_rate"]


def test_evaluate_baseline_policy_needs_no_budget(tiny_cfg, baseline_run):
    result = _invoke([
        "evaluate", "--config", tiny_cfg, "--policy", f"{baseline_run}/policy.ckpt",
        "--episodes", "2",
    ])
    summary = _last_json(result)
    assert summary["n_episodes"] == 2


def test_stale_config_hash_is_refused_without_force(tiny_cfg, rcppo_run, tmp_path):
    other = dict(TINY, eval={"n_episodes": 2, "seed": 9})
    other_path = tmp_path / "other.yaml"
    other_path.write_text(yaml.safe_dump(other))
    args = [
        "evaluate", "--config", str(other_path),
        "--policy", f"{rcppo_run}/policy.ckpt", "--z", "50", "--episodes", "2",
    ]
    result = CliRunner().invoke(cli.main, args)
    assert result.exit_code != 0
    assert "pass --force" in result.output
    forced = CliRunner().invoke(cli.main, args + ["--force"])
    assert forced.exit_code == 0, forced.output


def test_gridsearch_writes_the_sweep_table(tiny_cfg, tmp_path):
    out = tmp_path / "grid.csv"
    result = _invoke(["gridsearch", "--config", tiny_cfg, "--out", str(out), "--seed", "2"])
    assert "swept 1 cells" in result.output
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["r_goal", "p_goal", "beta", "reach_rate", "mean_cost", "on_front", "error"]
    assert len(rows) == 2
    assert rows[1][0] == "10.0"


def test_oracle_check_flags_the_published_reward_discrepancy():
    result = CliRunner().invoke(cli.main, ["oracle-check"])
    assert result.exit_code == 1
    assert "PASS reach_min_cost expected_reward: computed 15.0000" in result.output
    assert "PASS thresholded(20) expected_cost: computed 20.0000" in result.output
    assert (
        "FAIL thresholded(20) expected_reward: computed 16.6667, expected 23.3300"
        in result.output
    )
    assert "1 check(s) failed" in result.output
