import csv
import json
from pathlib import Path

import pytest

from dilemmarl import cli, training
from dilemmarl.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, PRESETS, load_config, main

SMALL = ["--override", "steps=4", "--override", "batch_size=16"]


def _run_dir(capsys) -> Path:
    return Path(capsys.readouterr().out.strip().splitlines()[-1])


def _manifest(run_dir: Path) -> dict:
    return json.loads((run_dir / "manifest.json").read_text())


# ---------------------------------------------------------------- config

# Reference hyperparameters per environment: gamma, beta, batch, norm, entropy, kl.
REFERENCE = {
    "ipd": (0.9, 0.5, 128, 5.0, 0.01, 0.0),
    "split": (0.9, 1.0, 64, 100.0, 0.0, 0.001),
    "tas": (0.96, 2.0, 64, 100.0, 0.0, 0.001),
}


@pytest.mark.parametrize("name", PRESETS)
def test_presets_carry_reference_hyperparameters(name):
    t = load_config(name).training
    env, algo = name.split("_")
    assert t.algorithm == algo.upper()
    assert (t.gamma, t.beta, t.batch_size, t.reward_norm, t.entropy_coef, t.kl_coef) == REFERENCE[env]
    assert t.rho == 0.5 and t.group_size == 8


def test_overrides_and_sections():
    cfg = load_config("ipd_adalign", ["seed=3", "evaluation.eval_games=10", "run.workers=2"])
    assert cfg.training.seed == 3
    assert cfg.evaluation["eval_games"] == 10
    assert cfg.run["workers"] == 2


def test_resolved_config_round_trips(tmp_path):
    cfg = load_config("tas_adalign", ["beta=1.5", "exploit_seeds=4,5"])
    path = tmp_path / "c.ini"
    path.write_text(cfg.to_ini())
    back = load_config(str(path))
    assert back.sections() == cfg.sections()
    assert back.evaluation["exploit_seeds"] == (4, 5)


def test_unknown_key_lists_valid_keys(capsys):
    assert main(["train", "--config", "ipd_grpo", "--override", "learning_rate=1"]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "learning_rate" in err and "entropy_coef" in err and "exploit_threshold" in err


def test_invalid_algorithm_names_valid_ones(capsys):
    assert main(["train", "--config", "ipd_grpo", "--override", "algorithm=PPO"]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert all(a in err for a in ("GRPO", "GRPO_SR", "ADALIGN"))


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.ini")]) == EXIT_CONFIG


def test_unknown_section(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[optimizer]\nlr = 1\n")
    assert main(["train", "--config", str(path)]) == EXIT_CONFIG


# ----------------------------------------------------------------- train

def test_train_writes_run_directory(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path))
    assert main(["train", "--config", "ipd_adalign", "--override", "seed=3", *SMALL,
                 "--override", "transcripts=2"]) == EXIT_OK
    run_dir = _run_dir(capsys)
    assert run_dir.parent == tmp_path
    assert run_dir.name.startswith("IPD_ADALIGN_3_")
    for name in ("manifest.json", "config.ini", "curve.csv", "final.policy", "transcripts.jsonl"):
        assert (run_dir / name).exists()
    m = _manifest(run_dir)
    assert m["status"] == "complete" and m["seeds"] == [3]
    assert m["config"]["training"]["buffer_capacity"] == 32
    assert "curve.csv" in m["artifacts"]
    assert len((run_dir / "transcripts.jsonl").read_text().splitlines()) == 2 * 10 * 2


def test_train_rerun_from_resolved_config_is_identical(tmp_path, capsys):
    assert main(["train", "--config", "tas_adalign", *SMALL, "--out-root", str(tmp_path)]) == EXIT_OK
    first = _run_dir(capsys)
    assert main(["train", "--config", str(first / "config.ini"), "--out-root", str(tmp_path)]) == EXIT_OK
    second = _run_dir(capsys)
    assert first != second
    assert (first / "curve.csv").read_bytes() == (second / "curve.csv").read_bytes()
    assert (first / "final.policy").read_bytes() == (second / "final.policy").read_bytes()


def test_train_against_frozen_builtin(tmp_path, capsys):
    assert main(["train", "--config", "ipd_grpo", *SMALL, "--override", "frozen=ALWAYS_COOP",
                 "--run-dir", str(tmp_path / "r")]) == EXIT_OK
    header = (tmp_path / "r" / "curve.csv").read_text().splitlines()[0]
    assert "opponent_reward" in header


def test_aborted_step_exits_3(tmp_path, monkeypatch):
    real = training.discounted_returns

    def poisoned(*args, **kwargs):
        out = real(*args, **kwargs)
        out[..., 0, 0] = float("nan")
        return out

    monkeypatch.setattr(training, "discounted_returns", poisoned)
    assert main(["train", "--config", "ipd_grpo", *SMALL, "--run-dir", str(tmp_path / "r")]) == EXIT_RUNTIME
    assert _manifest(tmp_path / "r")["status"] == "aborted"


def test_interrupted_run_leaves_manifest_incomplete(tmp_path, monkeypatch):
    def interrupted(*args, **kwargs):
        raise KeyboardInterrupt

    monkeypatch.setattr(cli, "train", interrupted)
    with pytest.raises(KeyboardInterrupt):
        main(["train", "--config", "ipd_grpo", "--run-dir", str(tmp_path / "r")])
    assert _manifest(tmp_path / "r")["status"] == "incomplete"


# ---------------------------------------------------------------- matrix

def test_matrix_with_checkpoint_and_builtins(tmp_path, capsys):
    assert main(["train", "--config", "ipd_adalign", *SMALL, "--run-dir", str(tmp_path / "t")]) == EXIT_OK
    roster = tmp_path / "roster.txt"
    roster.write_text("# learned vs baselines\nlearned = t/final.policy\nALWAYS_COOP\nALWAYS_DEFECT\n")
    assert main(["matrix", "--roster", str(roster), "--env", "IPD", "--n", "8",
                 "--run-dir", str(tmp_path / "m")]) == EXIT_OK
    rows = list(csv.reader((tmp_path / "m" / "matrix.csv").open()))
    assert rows[0] == ["", "learned", "ALWAYS_COOP", "ALWAYS_DEFECT"]
    assert len(rows) == 4 and all(len(r) == 4 for r in rows)
    assert float(rows[2][3]) == 0.0 and float(rows[3][2]) == 5.0
    assert (tmp_path / "m" / "report.json").exists()


@pytest.mark.parametrize("argv", [
    ["--roster", "ALWAYS_COOP,UNIFORM_RANDOM", "--env", "tas"],
    ["--roster", "ALWAYS_COOP", "--env", "IPD", "--n", "0"],
    ["--roster", "missing.policy", "--env", "IPD"],
])
def test_matrix_errors(tmp_path, capsys, argv):
    assert main(["matrix", *argv, "--out-root", str(tmp_path)]) == EXIT_CONFIG


def test_matrix_error_names_bad_entry(tmp_path, capsys):
    main(["matrix", "--roster", "ALWAYS_COOP,nowhere.policy", "--env", "IPD", "--out-root", str(tmp_path)])
    assert "nowhere.policy" in capsys.readouterr().err


# ----------------------------------------------------------------- probes

def test_probe_reciprocity_on_tit_for_tat(tmp_path, capsys):
    assert main(["probe", "--policy", "TIT_FOR_TAT", "--env", "IPD", "--probe", "reciprocity", "--n", "50",
                 "--run-dir", str(tmp_path / "p")]) == EXIT_OK
    stats = json.loads(capsys.readouterr().out.splitlines()[0])
    assert stats["p_defect_after_defect"] == 1.0 and stats["p_coop_after_coop"] == 1.0
    data = json.loads((tmp_path / "p" / "probe.json").read_text())
    assert data["stats"]["first_round_coop"] == 1.0
    assert (tmp_path / "p" / "probe.csv").exists()


def test_probe_tas_behavior_on_checkpoint(tmp_path, capsys):
    assert main(["train", "--config", "tas_grpo", *SMALL, "--override", "algorithm=GRPO_SR",
                 "--run-dir", str(tmp_path / "t")]) == EXIT_OK
    capsys.readouterr()
    assert main(["probe", "--policy", str(tmp_path / "t" / "final.policy"), "--probe", "tas_behavior",
                 "--n", "20", "--run-dir", str(tmp_path / "p")]) == EXIT_OK
    stats = json.loads(capsys.readouterr().out.splitlines()[0])
    for key in ("honesty_rate", "mean_proposal_upper", "mean_proposal_lower", "mean_collective_payoff"):
        assert key in stats


def test_probe_wrong_env_is_config_error(tmp_path):
    assert main(["probe", "--policy", "ALWAYS_COOP", "--env", "split", "--probe", "reciprocity",
                 "--out-root", str(tmp_path)]) == EXIT_CONFIG


# ---------------------------------------------------------------- exploit

def test_exploit_unconditional_cooperator(tmp_path, capsys):
    argv = ["exploit", "--frozen", "ALWAYS_COOP", "--config", "ipd_grpo",
            "--override", "optimizer=sgd", "--override", "lr=1.0", "--override", "steps=150",
            "--override", "batch_size=64", "--override", "eval_games=64", "--override", "workers=1",
            "--run-dir", str(tmp_path / "x")]
    assert main(argv) == EXIT_OK
    assert "verdict: EXPLOITABLE" in capsys.readouterr().out
    data = json.loads((tmp_path / "x" / "exploit.json").read_text())
    assert data["verdict"] == "EXPLOITABLE"
    assert _manifest(tmp_path / "x")["verdict"] == "EXPLOITABLE"


def test_presets_command_lists_all(capsys):
    assert main(["presets"]) == EXIT_OK
    assert capsys.readouterr().out.split() == list(PRESETS)


def test_matrix_builtins_follow_checkpoint_game_options(tmp_path, capsys):
    assert main(["train", "--config", "split_adalign", *SMALL, "--run-dir", str(tmp_path / "t")]) == EXIT_OK
    assert main(["matrix", "--roster", f"{tmp_path / 't' / 'final.policy'},ALWAYS_COOP,ALWAYS_DEFECT",
                 "--env", "split", "--n", "8", "--run-dir", str(tmp_path / "m")]) == EXIT_OK
    assert main(["matrix", "--roster", f"{tmp_path / 't' / 'final.policy'}", "--env", "IPD",
                 "--out-root", str(tmp_path)]) == EXIT_CONFIG


def test_train_from_initial_checkpoint(tmp_path, capsys):
    assert main(["train", "--config", "ipd_grpo", *SMALL, "--run-dir", str(tmp_path / "a")]) == EXIT_OK
    start = tmp_path / "a" / "final.policy"
    assert main(["train", "--config", "ipd_grpo", "--override", "steps=0", "--override", f"init={start}",
                 "--run-dir", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "b" / "final.policy").read_text().split("\n", 2)[2] == start.read_text().split("\n", 2)[2]
    assert main(["train", "--config", "ipd_grpo", "--override", "init=TIT_FOR_TAT",
                 "--run-dir", str(tmp_path / "c")]) == EXIT_CONFIG
