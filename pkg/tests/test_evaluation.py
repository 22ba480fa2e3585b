import csv
import json

import numpy as np
import pytest

from dilemmarl.envs import make_game
from dilemmarl.errors import ConfigurationError
from dilemmarl.evaluation import (
    cross_play, exploitability_report, grim_probe_split, head_to_head, reciprocity_probe_ipd,
    self_play_reward, split_efficiency, tas_behavior_probe,
)
from dilemmarl.policy import ScriptedPolicy, TabularPolicy, builtin_policy, truthful_cooperator
from dilemmarl.training import TrainConfig


@pytest.fixture(scope="module")
def ipd():
    return make_game("IPD")


def _ipd_roster(game):
    return [builtin_policy(n, game) for n in ("ALWAYS_COOP", "ALWAYS_DEFECT", "TIT_FOR_TAT", "GRIM")]


# Hand-computed per-round means over 10 rounds for (row, column).
IPD_EXPECTED = {
    ("ALWAYS_COOP", "ALWAYS_COOP"): (3.0, 3.0),
    ("ALWAYS_COOP", "ALWAYS_DEFECT"): (0.0, 5.0),
    ("ALWAYS_DEFECT", "ALWAYS_DEFECT"): (1.0, 1.0),
    ("ALWAYS_DEFECT", "TIT_FOR_TAT"): (1.4, 0.9),
    ("TIT_FOR_TAT", "ALWAYS_DEFECT"): (0.9, 1.4),
    ("GRIM", "ALWAYS_DEFECT"): (0.9, 1.4),
    ("TIT_FOR_TAT", "GRIM"): (3.0, 3.0),
    ("TIT_FOR_TAT", "TIT_FOR_TAT"): (3.0, 3.0),
    ("ALWAYS_COOP", "GRIM"): (3.0, 3.0),
}


def test_cross_play_ipd_baselines_exact(ipd):
    report = cross_play(_ipd_roster(ipd), "IPD", n_games=100, rounds=10, master_seed=0)
    for (row, col), expected in IPD_EXPECTED.items():
        assert report.entry(row, col) == pytest.approx(expected, abs=1e-12)
        i, j = report.names.index(row), report.names.index(col)
        assert np.allclose(report.stderr[i, j], 0.0, rtol=0, atol=1e-12)
    assert report.mean.shape == (4, 4, 2)
    assert report.n_games == 100


def test_cross_play_seeds_disjoint_and_reproducible(ipd):
    roster = [builtin_policy("UNIFORM_RANDOM", ipd), builtin_policy("TIT_FOR_TAT", ipd)]
    a = cross_play(roster, n_games=50, master_seed=3)
    b = cross_play(roster, n_games=50, master_seed=3)
    assert np.array_equal(a.mean, b.mean)
    seen = [s for seeds in a.seeds.values() for s in seeds]
    assert len(seen) == len(set(seen)) == 4 * 50


def test_cross_play_rejects_mixed_envs(ipd):
    with pytest.raises(ConfigurationError):
        cross_play([builtin_policy("ALWAYS_COOP", ipd), builtin_policy("ALWAYS_COOP", make_game("split"))])
    with pytest.raises(ConfigurationError):
        cross_play([builtin_policy("ALWAYS_COOP", ipd)], n_games=0)


def test_cross_play_report_files(tmp_path, ipd):
    report = cross_play(_ipd_roster(ipd)[:3], n_games=10)
    report.write(tmp_path)
    rows = list(csv.reader((tmp_path / "matrix.csv").open()))
    assert rows[0] == ["", "ALWAYS_COOP", "ALWAYS_DEFECT", "TIT_FOR_TAT"]
    assert float(rows[1][2]) == 0.0 and float(rows[2][1]) == 5.0
    detail = json.loads((tmp_path / "report.json").read_text())
    assert len(detail["pairs"]) == 9
    assert len(detail["pairs"][0]["per_round"]) == 10
    assert len(list(csv.reader((tmp_path / "pairs.csv").open()))) == 10


def test_reciprocity_probe_baselines(ipd):
    s = reciprocity_probe_ipd(builtin_policy("TIT_FOR_TAT", ipd), 200, 0).stats
    assert s["p_defect_after_defect"] == 1.0
    assert s["p_coop_after_coop"] == 1.0
    assert s["first_round_coop"] == 1.0
    s = reciprocity_probe_ipd(builtin_policy("ALWAYS_DEFECT", ipd), 200, 0).stats
    assert s["p_coop_after_coop"] == 0.0
    assert s["n_after_coop"] + s["n_after_defect"] == 200 * 9
    with pytest.raises(ConfigurationError):
        reciprocity_probe_ipd(builtin_policy("ALWAYS_COOP", make_game("split")))


def _grim_split(game):
    coop, defect = builtin_policy("ALWAYS_COOP", game), builtin_policy("ALWAYS_DEFECT", game)

    def fn(table, keys, ctx):
        opp = 1 - ctx.seat
        hit = np.zeros(len(ctx.idx), dtype=bool)
        for r in range(ctx.round):
            hit |= game.greedy(ctx.state, r, opp)[ctx.idx]
        return np.where(hit[:, None], defect.probs(table, keys), coop.probs(table, keys))

    return ScriptedPolicy(game, fn, "GRIM_SPLIT")


def test_grim_probe_split():
    game = make_game("split")
    s = grim_probe_split(builtin_policy("ALWAYS_COOP", game), 200, 0)
    assert s["pre_trigger_greedy_rate"] == 0.0 and s["post_trigger_greedy_rate"] == 0.0
    g = grim_probe_split(_grim_split(game), 200, 0)
    assert g["pre_trigger_greedy_rate"] == 0.0
    # greedy is only observable when the values conflict, which every valid pair has
    assert g["min_post_trigger_greedy_rate"] == 1.0
    assert len(g.per_round["greedy_rate"]) == 10


def test_tas_probe_truthful_cooperator():
    s = tas_behavior_probe(truthful_cooperator(make_game("tas")), 100, 0).stats
    assert s["mean_proposal_upper"] == 10.0
    assert s["mean_proposal_lower"] == 0.0
    assert s["honesty_rate"] == 1.0
    assert s["mean_collective_payoff"] == 100.0
    assert s["efficiency"] == 1.0
    assert s["welfare_consistent"]


def test_tas_probe_random_policy_welfare_bounds():
    s = tas_behavior_probe(builtin_policy("UNIFORM_RANDOM", make_game("tas")), 100, 0).stats
    assert 0 <= s["honesty_rate"] <= 1
    assert s["mean_collective_payoff"] <= 100
    assert s["welfare_consistent"]


def test_split_efficiency_references():
    game = make_game("split")
    coop = split_efficiency(builtin_policy("ALWAYS_COOP", game), 200, 0)
    assert coop["efficiency"] == pytest.approx(1.0) and coop["raw_ratio"] == pytest.approx(1.0)
    defect = split_efficiency(builtin_policy("ALWAYS_DEFECT", game), 200, 0)
    assert defect["efficiency"] == pytest.approx(0.0)
    assert defect["raw_ratio"] == pytest.approx(defect["defect_collective"] / defect["coop_collective"])


def test_head_to_head_averages_seats(ipd):
    learner, frozen = head_to_head(builtin_policy("ALWAYS_DEFECT", ipd), builtin_policy("ALWAYS_COOP", ipd), 20)
    assert (learner, frozen) == (5.0, 0.0)
    assert self_play_reward(builtin_policy("ALWAYS_DEFECT", ipd), 10) == 1.0


def test_exploitability_verdicts(tmp_path, ipd):
    cfg = TrainConfig.for_env("IPD", "GRPO", batch_size=64, steps=150, lr=1.0)
    coop = exploitability_report(builtin_policy("ALWAYS_COOP", ipd), cfg, seeds=(0, 1, 2), eval_games=64)
    assert coop.verdict == "EXPLOITABLE"
    assert all(f < 0.5 for f in coop.final_frozen)
    tft = exploitability_report(builtin_policy("TIT_FOR_TAT", ipd), cfg.replace(steps=300), seeds=(0, 1, 2),
                                eval_games=64)
    assert tft.verdict == "NOT EXPLOITABLE"
    files = tft.write(tmp_path)
    data = json.loads(files[0].read_text())
    assert data["verdict"] == "NOT EXPLOITABLE" and len(data["per_seed"]) == 3
    assert len(data["frozen_reward_trajectories"][0]) == 300


def test_exploitability_parallel_matches_serial(ipd):
    cfg = TrainConfig.for_env("IPD", "GRPO", batch_size=16, steps=10)
    frozen = builtin_policy("ALWAYS_COOP", ipd)
    serial = exploitability_report(frozen, cfg, seeds=(0, 1), eval_games=16)
    parallel = exploitability_report(frozen, cfg, seeds=(0, 1), eval_games=16, workers=2)
    assert serial.to_dict() == parallel.to_dict()


def test_probe_requires_matching_env():
    with pytest.raises(ConfigurationError):
        tas_behavior_probe(TabularPolicy(make_game("IPD")))
    with pytest.raises(ConfigurationError):
        grim_probe_split(TabularPolicy(make_game("IPD")))
