"""Multi-agent GRPO, its sum-of-rewards variant, and Advantage Alignment.

All three share one loop: roll out a CRN-grouped batch, compute
round-discounted returns, baseline them with the leave-one-out group mean,
optionally reshape the advantages, and take a gradient-ascent step on the
tabular logits.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .advantage import align_advantages, loo_advantages
from .core import Batch, Trajectory, discounted_returns, make_crn_batch, run_batch
from .envs import EnvId, Game, make_game
from .errors import ConfigurationError, StepAborted
from .policy import (
    AgentBuffer, Policy, SparseGradient, TabularPolicy, entropy, entropy_gradient,
    sample_opponent, save_policy,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("GRPO", "GRPO_SR", "ADALIGN")

# Per-environment defaults from the experimental hyperparameter table.
ENV_DEFAULTS = {
    EnvId.IPD: dict(batch_size=128, reward_norm=5.0, entropy_coef=0.01, gamma=0.9, beta=0.5),
    EnvId.SPLIT: dict(batch_size=64, reward_norm=100.0, entropy_coef=0.0, gamma=0.9, beta=1.0),
    EnvId.TAS: dict(batch_size=64, reward_norm=100.0, entropy_coef=0.0, gamma=0.96, beta=2.0),
}


@dataclass
class TrainConfig:
    algorithm: str = "GRPO"
    env: str = "IPD"
    rounds: int = 10
    batch_size: int = 128
    group_size: int = 8
    gamma: float = 0.9
    beta: float = 0.5
    rho: float = 0.5
    lr: float = 0.1
    entropy_coef: float = 0.01
    kl_coef: float = 0.0
    reward_norm: float = 5.0
    steps: int = 2000
    seed: int = 0
    buffer_capacity: int = 32
    buffer_cadence: int = 10
    eval_every: int = 0
    eval_games: int = 64
    outer_gamma: bool = True
    optimizer: str = "sgd"
    adam_betas: tuple = (0.9, 0.999)
    ipd_memory: int = 1
    ipd_grim_bit: bool = False
    split_grid: tuple = (0, 5, 10)
    tas_grid: tuple = tuple(range(11))
    greedy_threshold: float = 5.0

    @classmethod
    def for_env(cls, env, algorithm: str = "GRPO", **overrides) -> "TrainConfig":
        env = EnvId.parse(env)
        values = dict(ENV_DEFAULTS[env], env=env.value, algorithm=algorithm)
        values.update(overrides)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def validate(self):
        self.algorithm = str(self.algorithm).upper()
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(
                f"unknown algorithm {self.algorithm!r}; valid algorithms are {', '.join(ALGORITHMS)}"
            )
        self.env = EnvId.parse(self.env).value
        if self.group_size < 2:
            raise ConfigurationError("group_size must be >= 2")
        if self.batch_size % self.group_size:
            raise ConfigurationError("group_size must divide batch_size")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if not 0 <= self.rho <= 1:
            raise ConfigurationError("rho must lie in [0, 1]")
        if self.reward_norm <= 0:
            raise ConfigurationError("reward_norm must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError("optimizer must be 'sgd' or 'adam'")
        if self.steps < 0 or self.rounds < 1:
            raise ConfigurationError("steps must be >= 0 and rounds >= 1")

    @property
    def env_id(self) -> EnvId:
        return EnvId.parse(self.env)

    def make_game(self) -> Game:
        env = self.env_id
        if env == EnvId.IPD:
            return make_game(env, memory=self.ipd_memory, grim_bit=self.ipd_grim_bit)
        if env == EnvId.SPLIT:
            return make_game(env, grid=self.split_grid, greedy_threshold=self.greedy_threshold)
        return make_game(env, grid=self.tas_grid, greedy_threshold=self.greedy_threshold)

    def replace(self, **changes) -> "TrainConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


# ------------------------------------------------------------- rollouts

def collect_batch(config: TrainConfig, params: TabularPolicy, buffer: AgentBuffer | None,
                  step: int, frozen: Policy | None = None) -> Batch:
    """Roll out one CRN-grouped batch.

    One opponent is chosen per group: the live policy, a buffer snapshot
    (Advantage Alignment only, with probability ``rho``), or ``frozen``.
    The learner's seat alternates between groups.
    """
    game = params.game
    specs = make_crn_batch(config.batch_size, config.group_size, [config.seed, step, 0],
                           config.env_id, config.rounds)
    rng = np.random.default_rng([config.seed, step, 1])
    k = config.group_size
    n = len(specs)
    seat_0, seat_1, ids = [None] * n, [None] * n, ["self"] * n
    mask = np.zeros((n, 2), dtype=bool)
    for g in range(n // k):
        learner_seat = g % 2
        if frozen is not None:
            opp, oid = frozen, f"frozen:{frozen.name}"
        elif config.algorithm == "ADALIGN" and buffer is not None:
            opp, oid = sample_opponent(buffer, params, config.rho, rng)
        else:
            opp, oid = params, "self"
        for i in range(g * k, (g + 1) * k):
            seats = [None, None]
            seats[learner_seat], seats[1 - learner_seat] = params, opp
            seat_0[i], seat_1[i] = seats
            ids[i] = oid
            mask[i, learner_seat] = True
            if oid == "self":
                mask[i, 1 - learner_seat] = True
    batch = run_batch(game, specs, seat_0, seat_1, ids)
    batch.learner_mask = mask
    return batch


def sum_rewards_transform(traj):
    """Replace both seats' rewards by their per-step sum (works on a Trajectory or a Batch)."""
    total = traj.rewards.sum(axis=-1, keepdims=True)
    return dataclasses.replace(traj, rewards=np.repeat(total, 2, axis=-1))


# ------------------------------------------------------------- gradient

@dataclass
class StepGradient:
    grad: SparseGradient
    advantages: np.ndarray      # (B, T, 2) coefficients before the time discount
    mean_entropy: float
    n_pairs: int


def batch_advantages(batch: Batch, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(A, coeff)``: LOO advantages and the per-step policy-gradient coefficient."""
    rewards = batch.rewards
    if config.algorithm == "GRPO_SR":
        rewards = sum_rewards_transform(batch).rewards
    returns = discounted_returns(rewards, batch.round_of_step, config.gamma, config.reward_norm)
    b, t, _ = returns.shape
    k = config.group_size
    adv = loo_advantages(returns.reshape(b // k, k, t, 2), axis=1).reshape(b, t, 2)
    if config.algorithm != "ADALIGN" or config.beta == 0:
        return adv, adv
    per_round = batch.game.steps_per_round
    last = np.arange(batch.rounds) * per_round + per_round - 1
    a_self = adv[:, last, :].transpose(0, 2, 1)          # (B, 2, R)
    a_opp = a_self[:, ::-1, :]
    aligned = align_advantages(a_self, a_opp, config.beta, config.gamma, config.outer_gamma)
    coeff = aligned.transpose(0, 2, 1)[:, batch.round_of_step, :]
    return adv, coeff


def compute_step_gradient(batch: Batch, config: TrainConfig, params: TabularPolicy,
                          step: int = 0) -> StepGradient:
    """Policy-gradient estimate for the learner seats of ``batch``.

    Each (trajectory, learner seat) pair contributes
    ``sum_t gamma**round(t) * coeff_t * grad log pi(a_t | s_t)``; the result
    is averaged over pairs, and the entropy bonus is averaged over visits.
    """
    game = params.game
    mask = batch.learner_mask if batch.learner_mask is not None else np.ones((batch.size, 2), bool)
    adv, coeff = batch_advantages(batch, config)
    if not np.isfinite(coeff).all():
        raise StepAborted(step, "non-finite advantage")
    n_pairs = int(mask.sum())
    discount = config.gamma ** batch.round_of_step.astype(np.float64)
    weights = coeff * discount[None, :, None] * mask[:, None, :] / max(n_pairs, 1)

    grad = SparseGradient(game)
    ent_bonus = config.entropy_coef + config.kl_coef
    visits = []
    for name in game.tables:
        steps = np.flatnonzero(np.array(batch.tables) == name)
        if steps.size == 0:
            continue
        sel = np.broadcast_to(mask[:, None, :], (batch.size, steps.size, 2))
        keys = batch.keys[:, steps, :][sel]
        acts = batch.actions[:, steps, :][sel]
        w = weights[:, steps, :][sel]
        p = params.probs(name, keys)
        rows = -p * w[:, None]
        rows[np.arange(len(acts)), acts] += w
        np.add.at(grad.dense[name], keys, rows)
        grad.visited[name][keys] = True
        visits.append((name, keys, p))

    n_visits = sum(len(k) for _, k, _ in visits)
    ent_sum = 0.0
    for name, keys, p in visits:
        ent_sum += float(entropy(p).sum())
        if ent_bonus:
            np.add.at(grad.dense[name], keys, (ent_bonus / n_visits) * entropy_gradient(p))
    if not grad.is_finite():
        raise StepAborted(step, "non-finite gradient")
    return StepGradient(grad, coeff, ent_sum / max(n_visits, 1), n_pairs)


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    params: TabularPolicy
    curve: list[dict]
    buffer: AgentBuffer
    config: TrainConfig
    aborted: str | None = None
    checkpoints: list[Path] = field(default_factory=list)


class _Adam:
    def __init__(self, params: TabularPolicy, betas, eps=1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.logits.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.logits.items()}
        self.t = 0

    def direction(self, grad: SparseGradient) -> SparseGradient:
        self.t += 1
        out = {}
        for k, g in grad.dense.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            out[k] = mhat / (np.sqrt(vhat) + self.eps)
        return SparseGradient(grad.game, out, grad.visited)


CURVE_FIELDS = ("step", "mean_reward", "collective_reward", "learner_reward", "opponent_reward",
                "entropy", "grad_norm", "buffer_fraction")


def _step_record(step, batch: Batch, sg: StepGradient, buffer_fraction: float) -> dict:
    per_round = batch.round_rewards().mean(axis=1)  # (B, 2)
    mask = batch.learner_mask
    learner = per_round[mask].mean()
    others = per_round[~mask]
    return {
        "step": step,
        "mean_reward": float(per_round.mean()),
        "collective_reward": float(per_round.sum(axis=1).mean()),
        "learner_reward": float(learner),
        "opponent_reward": float(others.mean()) if others.size else float(learner),
        "entropy": sg.mean_entropy,
        "grad_norm": sg.grad.norm(),
        "buffer_fraction": buffer_fraction,
    }


def train(config: TrainConfig, frozen: Policy | None = None, out_dir=None,
          init: TabularPolicy | None = None,
          probe: Callable[[TabularPolicy, TrainConfig, int], dict] | None = None) -> TrainResult:
    """Run ``config.steps`` optimisation steps from a uniform policy.

    ``frozen`` turns self-play into training against a fixed opponent that
    never receives gradient.  With ``out_dir`` the curve CSV and checkpoints
    are written there.  ``probe`` is called every ``eval_every`` steps and
    its scalar results are appended to that step's curve record.
    """
    config.validate()
    game = config.make_game()
    if frozen is not None and not frozen.game.same_as(game):
        raise ConfigurationError(f"frozen policy was built for {frozen.game!r}, not {game!r}")
    params = init.copy(name="learner") if init is not None else TabularPolicy(game, name="learner")
    buffer = AgentBuffer(config.buffer_capacity, config.buffer_cadence)
    adam = _Adam(params, config.adam_betas) if config.optimizer == "adam" else None
    if probe is None and config.eval_every:
        from .evaluation import default_probe
        probe = default_probe
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    result = TrainResult(params, [], buffer, config)

    for step in range(1, config.steps + 1):
        batch = collect_batch(config, params, buffer, step, frozen=frozen)
        n_groups = config.batch_size // config.group_size
        buffer_fraction = sum(
            batch.opponent_ids[g * config.group_size].startswith("buffer") for g in range(n_groups)
        ) / n_groups
        try:
            sg = compute_step_gradient(batch, config, params, step)
        except StepAborted as exc:
            log.error("aborting run: %s", exc)
            result.aborted = str(exc)
            break
        direction = adam.direction(sg.grad) if adam is not None else sg.grad
        params.apply_update(direction, config.lr)
        record = _step_record(step, batch, sg, buffer_fraction)
        if config.algorithm == "ADALIGN" and frozen is None:
            buffer.maybe_push(params, step)
        if config.eval_every and step % config.eval_every == 0:
            record.update(probe(params, config, step))
            if out is not None:
                result.checkpoints.append(save_policy(params, out / "checkpoints" / f"step_{step:06d}.policy"))
        result.curve.append(record)

    if out is not None:
        result.checkpoints.append(save_policy(params, out / "final.policy"))
        write_curve(result.curve, out / "curve.csv")
    return result


def train_vs_frozen(config: TrainConfig, frozen: Policy, out_dir=None, **kwargs) -> TrainResult:
    """Train a fresh learner against ``frozen``; the curve logs the frozen seat as ``opponent_reward``."""
    return train(config, frozen=frozen, out_dir=out_dir, **kwargs)


def write_curve(curve: list[dict], path) -> Path:
    path = Path(path)
    fields = list(CURVE_FIELDS)
    for rec in curve:
        for k in rec:
            if k not in fields:
                fields.append(k)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for rec in curve:
            writer.writerow({k: _fmt_cell(rec.get(k)) for k in fields})
    return path


def _fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
