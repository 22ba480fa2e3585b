import numpy as np
import pytest

from dilemmarl import training
from dilemmarl.errors import ConfigurationError
from dilemmarl.policy import AgentBuffer, TabularPolicy, builtin_policy
from dilemmarl.training import (
    TrainConfig, batch_advantages, collect_batch, compute_step_gradient, sum_rewards_transform, train,
    train_vs_frozen,
)


def _random_policy(game, seed=0, scale=1.0):
    pol = TabularPolicy(game)
    rng = np.random.default_rng(seed)
    for arr in pol.logits.values():
        arr[:] = scale * rng.normal(size=arr.shape)
    return pol


# ---------------------------------------------------------------- config

def test_env_defaults():
    ipd = TrainConfig.for_env("ipd", "ADALIGN")
    assert (ipd.batch_size, ipd.reward_norm, ipd.entropy_coef, ipd.gamma, ipd.beta) == (128, 5.0, 0.01, 0.9, 0.5)
    tas = TrainConfig.for_env("tas", "GRPO")
    assert (tas.batch_size, tas.reward_norm, tas.gamma, tas.beta) == (64, 100.0, 0.96, 2.0)
    assert tas.rho == 0.5 and tas.group_size == 8


def test_invalid_algorithm_names_valid_ones():
    with pytest.raises(ConfigurationError) as err:
        TrainConfig.for_env("IPD", "PPO")
    for name in ("GRPO", "GRPO_SR", "ADALIGN"):
        assert name in str(err.value)


@pytest.mark.parametrize("change", [
    {"group_size": 1}, {"group_size": 5}, {"gamma": 0.0}, {"beta": -1.0}, {"rho": 1.5},
    {"reward_norm": 0.0}, {"optimizer": "rmsprop"},
])
def test_config_validation(change):
    with pytest.raises(ConfigurationError):
        TrainConfig.for_env("IPD", "GRPO", **change)


# -------------------------------------------------------------- batches

def test_learner_seat_alternates_per_group():
    cfg = TrainConfig.for_env("IPD", "GRPO", batch_size=32, group_size=8)
    game = cfg.make_game()
    frozen = builtin_policy("ALWAYS_DEFECT", game)
    batch = collect_batch(cfg, TabularPolicy(game), None, 1, frozen=frozen)
    for g in range(4):
        block = batch.learner_mask[g * 8:(g + 1) * 8]
        assert (block[:, g % 2]).all() and not (block[:, 1 - g % 2]).any()
    assert set(batch.opponent_ids) == {"frozen:ALWAYS_DEFECT"}


def test_self_play_trains_both_seats():
    cfg = TrainConfig.for_env("IPD", "GRPO", batch_size=16)
    batch = collect_batch(cfg, TabularPolicy(cfg.make_game()), None, 1)
    assert batch.learner_mask.all()


def test_buffer_opponents_receive_no_gradient():
    cfg = TrainConfig.for_env("IPD", "ADALIGN", batch_size=64, rho=1.0)
    game = cfg.make_game()
    params = _random_policy(game)
    buf = AgentBuffer()
    buf.push(_random_policy(game, 1), 10)
    batch = collect_batch(cfg, params, buf, 3)
    assert all(oid == "buffer:10" for oid in batch.opponent_ids)
    assert batch.learner_mask.sum() == 64
    snap_before = buf.entries[0][1].logits["move"].copy()
    sg = compute_step_gradient(batch, cfg, params)
    params.apply_update(sg.grad, 0.1)
    assert np.array_equal(buf.entries[0][1].logits["move"], snap_before)


def test_sum_rewards_transform():
    cfg = TrainConfig.for_env("IPD", "GRPO", batch_size=16)
    batch = collect_batch(cfg, TabularPolicy(cfg.make_game()), None, 1)
    sr = sum_rewards_transform(batch)
    assert np.array_equal(sr.rewards[..., 0], batch.rewards.sum(axis=-1))
    assert np.array_equal(sr.rewards[..., 0], sr.rewards[..., 1])
    traj = sum_rewards_transform(batch.trajectory(0))
    assert np.array_equal(traj.rewards[:, 1], batch.rewards[0].sum(axis=-1))


# ------------------------------------------------------------ estimator

@pytest.mark.parametrize("env", ["IPD", "split", "tas"])
def test_adalign_beta_zero_matches_grpo_gradient(env):
    grpo = TrainConfig.for_env(env, "GRPO", batch_size=32)
    adalign = grpo.replace(algorithm="ADALIGN", beta=0.0)
    params = _random_policy(grpo.make_game(), 3)
    batch = collect_batch(grpo, params, None, 7)
    g1 = compute_step_gradient(batch, grpo, params).grad
    g2 = compute_step_gradient(batch, adalign, params).grad
    for name in g1.dense:
        assert np.allclose(g1.dense[name], g2.dense[name], rtol=0, atol=1e-12)


def test_adalign_beta_zero_training_matches_grpo():
    grpo = TrainConfig.for_env("IPD", "GRPO", batch_size=32, steps=15)
    a = train(grpo)
    b = train(grpo.replace(algorithm="ADALIGN", beta=0.0, rho=0.0))
    assert a.params.equals(b.params)


def test_deterministic_policy_has_zero_advantages():
    for env, name in (("IPD", "TIT_FOR_TAT"), ("split", "ALWAYS_COOP")):
        cfg = TrainConfig.for_env(env, "ADALIGN", batch_size=32)
        game = cfg.make_game()
        pol = builtin_policy(name, game)
        batch = collect_batch(cfg, TabularPolicy(game), None, 1, frozen=pol)
        det = training.run_batch(game, batch.specs, pol, pol)
        det.learner_mask = batch.learner_mask
        adv, coeff = batch_advantages(det, cfg)
        assert np.array_equal(adv, np.zeros_like(adv))
        assert np.array_equal(coeff, np.zeros_like(coeff))


def test_adalign_coefficients_shared_within_round():
    cfg = TrainConfig.for_env("tas", "ADALIGN", batch_size=16)
    params = _random_policy(cfg.make_game(), 5)
    batch = collect_batch(cfg, params, None, 2)
    _, coeff = batch_advantages(batch, cfg)
    assert np.array_equal(coeff[:, 0::2], coeff[:, 1::2])


def test_gradient_points_towards_defection_against_defector():
    """One-round IPD against ALWAYS_DEFECT: the averaged estimate matches the exact
    policy gradient ``p_a (r_a - E[r])`` = (-0.25, +0.25) at uniform logits."""
    cfg = TrainConfig.for_env("IPD", "GRPO", rounds=1, batch_size=1000, group_size=8,
                              reward_norm=1.0, entropy_coef=0.0)
    game = cfg.make_game()
    params = TabularPolicy(game)
    frozen = builtin_policy("ALWAYS_DEFECT", game)
    samples = []
    for step in range(100):
        batch = collect_batch(cfg, params, None, step, frozen=frozen)
        samples.append(compute_step_gradient(batch, cfg, params).grad.dense["move"][0])
    samples = np.array(samples)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    exact = np.array([-0.25, 0.25])
    assert (np.abs(mean - exact) <= 3 * se).all()
    assert mean[1] > 0


def test_entropy_bonus_pushes_towards_uniform():
    cfg = TrainConfig.for_env("IPD", "GRPO", batch_size=16, entropy_coef=1.0)
    game = cfg.make_game()
    params = TabularPolicy(game)
    params.logits["move"][:, 0] = 3.0
    frozen = builtin_policy("ALWAYS_COOP", game)
    batch = collect_batch(cfg, params, None, 1, frozen=frozen)
    zero = cfg.replace(entropy_coef=0.0)
    diff = compute_step_gradient(batch, cfg, params).grad.dense["move"] - \
        compute_step_gradient(batch, zero, params).grad.dense["move"]
    visited = np.any(diff != 0, axis=1)
    assert visited.any()
    assert (diff[visited, 0] < 0).all() and (diff[visited, 1] > 0).all()


# ---------------------------------------------------------------- loop

def test_training_is_deterministic():
    cfg = TrainConfig.for_env("tas", "ADALIGN", batch_size=16, steps=12, buffer_cadence=3)
    a, b = train(cfg), train(cfg)
    assert a.curve == b.curve
    assert a.params.equals(b.params)
    c = train(cfg.replace(seed=1))
    assert not c.params.equals(a.params)


def test_adam_runs_and_differs_from_sgd():
    cfg = TrainConfig.for_env("IPD", "GRPO", batch_size=32, steps=5)
    sgd = train(cfg)
    adam = train(cfg.replace(optimizer="adam", lr=0.05))
    assert not sgd.params.equals(adam.params)


def test_buffer_filled_on_cadence_for_adalign_only():
    cfg = TrainConfig.for_env("IPD", "ADALIGN", batch_size=16, steps=25, buffer_cadence=10)
    assert train(cfg).buffer.steps() == [10, 20]
    assert train(cfg.replace(algorithm="GRPO")).buffer.steps() == []
    frozen = builtin_policy("ALWAYS_COOP", cfg.make_game())
    assert train_vs_frozen(cfg, frozen).buffer.steps() == []


def test_curve_records_buffer_fraction():
    cfg = TrainConfig.for_env("IPD", "ADALIGN", batch_size=64, steps=30, buffer_cadence=5, rho=1.0)
    curve = train(cfg).curve
    assert curve[0]["buffer_fraction"] == 0.0
    assert curve[-1]["buffer_fraction"] == 1.0


def test_nan_aborts_step(monkeypatch, tmp_path):
    real = training.discounted_returns

    def poisoned(*args, **kwargs):
        out = real(*args, **kwargs)
        out[0, 0, 0] = np.nan
        return out

    monkeypatch.setattr(training, "discounted_returns", poisoned)
    res = train(TrainConfig.for_env("IPD", "GRPO", batch_size=16, steps=5), out_dir=tmp_path)
    assert res.aborted and "step 1" in res.aborted
    assert res.curve == []
    assert (tmp_path / "curve.csv").exists()


def test_outputs_written(tmp_path):
    cfg = TrainConfig.for_env("IPD", "GRPO", batch_size=16, steps=6, eval_every=3, eval_games=16)
    res = train(cfg, out_dir=tmp_path)
    assert (tmp_path / "final.policy").exists()
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_000003.policy", "step_000006.policy"]
    header = (tmp_path / "curve.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["step", "mean_reward", "collective_reward"]
    assert "eval_p_defect_after_defect" in header
    assert len(res.curve) == 6


def test_learner_exploits_unconditional_cooperator():
    cfg = TrainConfig.for_env("IPD", "GRPO", batch_size=64, steps=150, lr=1.0)
    res = train_vs_frozen(cfg, builtin_policy("ALWAYS_COOP", cfg.make_game()))
    tail = res.curve[-10:]
    assert np.mean([r["learner_reward"] for r in tail]) > 4.5
    assert np.mean([r["opponent_reward"] for r in tail]) < 0.5


def test_learner_cooperates_with_tit_for_tat():
    cfg = TrainConfig.for_env("IPD", "GRPO", batch_size=64, steps=300, lr=1.0)
    res = train_vs_frozen(cfg, builtin_policy("TIT_FOR_TAT", cfg.make_game()))
    first = np.mean([r["opponent_reward"] for r in res.curve[:10]])
    last = np.mean([r["opponent_reward"] for r in res.curve[-10:]])
    assert last > first
    assert last > 2.5
