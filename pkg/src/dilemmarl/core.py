"""Episode execution, CRN seeding and return computation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .envs import EnvId, Game
from .errors import ConfigurationError, InternalError
from .policy import DecisionContext, Policy
from .rng import ACTION_TAG, as_seeds, uniforms

_U64 = 2 ** 64


@dataclass(frozen=True)
class EpisodeSpec:
    """Everything that fixes one episode apart from the two policies."""

    env_id: EnvId
    rounds: int
    env_seed: int
    crn_group: int
    action_seeds: tuple[int, int]

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigurationError("rounds must be positive")


def _distinct_u64(rng: np.random.Generator, n: int, exclude=()) -> list[int]:
    seen = set(exclude)
    out = []
    while len(out) < n:
        for s in rng.integers(0, _U64, size=n - len(out), dtype=np.uint64, endpoint=False).tolist():
            if s not in seen:
                seen.add(s)
                out.append(s)
    return out


def make_crn_batch(batch_size: int, group_size: int, master_seed, env_id=EnvId.IPD,
                   rounds: int = 10) -> list[EpisodeSpec]:
    """``batch_size`` specs in ``batch_size // group_size`` groups sharing an env seed.

    Action seeds are distinct across the whole batch; group env seeds are
    distinct across groups.
    """
    if group_size < 2:
        raise ValueError("group size must be >= 2 for a leave-one-out baseline")
    if batch_size % group_size != 0:
        raise ValueError(f"group size {group_size} does not divide batch size {batch_size}")
    env_id = EnvId.parse(env_id)
    rng = np.random.default_rng(master_seed)
    n_groups = batch_size // group_size
    env_seeds = _distinct_u64(rng, n_groups)
    action_seeds = _distinct_u64(rng, 2 * batch_size)
    return [
        EpisodeSpec(env_id, rounds, env_seeds[i // group_size], i // group_size,
                    (action_seeds[2 * i], action_seeds[2 * i + 1]))
        for i in range(batch_size)
    ]


def make_eval_specs(n_games: int, master_seed, env_id=EnvId.IPD, rounds: int = 10) -> list[EpisodeSpec]:
    """Independent episodes (every game its own env seed), for evaluation."""
    env_id = EnvId.parse(env_id)
    rng = np.random.default_rng(master_seed)
    env_seeds = _distinct_u64(rng, n_games)
    action_seeds = _distinct_u64(rng, 2 * n_games)
    return [EpisodeSpec(env_id, rounds, env_seeds[i], i, (action_seeds[2 * i], action_seeds[2 * i + 1]))
            for i in range(n_games)]


@dataclass
class Trajectory:
    """One episode, both seats, time-indexed by decision step."""

    spec: EpisodeSpec
    opponent_id: str
    obs: tuple[list, list]
    actions: np.ndarray      # (T, 2) action indices
    rewards: np.ndarray      # (T, 2)
    round_index: np.ndarray  # (T,) round of each decision step
    tables: tuple[str, ...]  # (T,) decision type of each step
    phases: tuple[str, ...]

    @property
    def length(self) -> int:
        return len(self.round_index)

    def seat_rewards(self, seat: int) -> np.ndarray:
        return self.rewards[:, seat]

    def same_as(self, other: "Trajectory") -> bool:
        return (self.spec == other.spec and self.obs == other.obs
                and self.actions.tobytes() == other.actions.tobytes()
                and self.rewards.tobytes() == other.rewards.tobytes())


@dataclass
class Batch:
    """Lockstep rollout of many episodes on one game."""

    game: Game
    specs: list[EpisodeSpec]
    state: object
    keys: np.ndarray      # (B, T, 2) key indices into game.tables[tables[t]]
    actions: np.ndarray   # (B, T, 2)
    rewards: np.ndarray   # (B, T, 2)
    tables: tuple[str, ...]
    phases: tuple[str, ...]
    round_of_step: np.ndarray
    opponent_ids: list[str] = field(default_factory=list)
    learner_mask: np.ndarray | None = None  # (B, 2) seats that receive gradient

    @property
    def size(self) -> int:
        return len(self.specs)

    @property
    def rounds(self) -> int:
        return int(self.round_of_step[-1]) + 1

    def round_rewards(self) -> np.ndarray:
        """(B, R, 2) payoff per round."""
        b, t, _ = self.rewards.shape
        return self.rewards.reshape(b, self.rounds, t // self.rounds, 2).sum(axis=2)

    def trajectory(self, i: int) -> Trajectory:
        obs = tuple(
            [self.game.tables[self.tables[t]].keys[self.keys[i, t, s]] for t in range(len(self.tables))]
            for s in (0, 1)
        )
        return Trajectory(
            spec=self.specs[i],
            opponent_id=self.opponent_ids[i] if self.opponent_ids else "self",
            obs=obs,
            actions=self.actions[i].copy(),
            rewards=self.rewards[i].copy(),
            round_index=self.round_of_step.copy(),
            tables=self.tables,
            phases=self.phases,
        )


def _group_by_policy(policies: Sequence[Policy]) -> list[tuple[Policy, np.ndarray]]:
    order: dict[int, list] = {}
    objs: dict[int, Policy] = {}
    for i, p in enumerate(policies):
        order.setdefault(id(p), []).append(i)
        objs[id(p)] = p
    return [(objs[k], np.array(v, dtype=np.int64)) for k, v in order.items()]


def run_batch(game: Game, specs: Sequence[EpisodeSpec], seat_0, seat_1,
              opponent_ids: Sequence[str] | None = None) -> Batch:
    """Play every spec to completion.

    ``seat_0``/``seat_1`` are a single policy or one policy per episode.
    Action sampling for episode ``i`` and seat ``s`` uses only
    ``specs[i].action_seeds[s]``; environment draws use only the env seed.
    """
    specs = list(specs)
    n = len(specs)
    if n == 0:
        raise ValueError("empty batch")
    rounds = specs[0].rounds
    for s in specs:
        if s.env_id != game.env_id:
            raise ConfigurationError(f"spec for {s.env_id.value} run on {game.env_id.value}")
        if s.rounds != rounds:
            raise ConfigurationError("all specs in a batch must have the same number of rounds")
    seat_policies = []
    for pol in (seat_0, seat_1):
        pols = list(pol) if isinstance(pol, (list, tuple)) else [pol] * n
        if len(pols) != n:
            raise ConfigurationError("need one policy per episode")
        groups = _group_by_policy(pols)
        for p, _ in groups:
            if not p.game.same_as(game):
                raise ConfigurationError(f"policy {p.name} was built for {p.game!r}, not {game!r}")
        seat_policies.append(groups)

    env_seeds = as_seeds([s.env_seed for s in specs])
    act_seeds = [as_seeds([s.action_seeds[k] for s in specs]) for k in (0, 1)]
    state = game.new_state(env_seeds, rounds)
    n_steps = rounds * game.steps_per_round
    keys = np.zeros((n, n_steps, 2), dtype=np.int64)
    actions = np.zeros((n, n_steps, 2), dtype=np.int64)
    rewards = np.zeros((n, n_steps, 2))
    tables, phases, round_of_step = [], [], []

    for r in range(rounds):
        for pi, phase in enumerate(game.phases):
            t = r * game.steps_per_round + pi
            tables.append(phase.table)
            phases.append(phase.name)
            round_of_step.append(r)
            for simultaneous in game.turn_order(r, phase):
                chosen = {}
                for seat in simultaneous:
                    keys[:, t, seat] = game.keys(state, r, phase, seat)
                    chosen[seat] = _sample(game, state, r, phase, seat, keys[:, t, seat],
                                           seat_policies[seat], act_seeds[seat], t)
                for seat in simultaneous:
                    actions[:, t, seat] = chosen[seat]
                    game.record(state, r, phase, seat, chosen[seat])
            rewards[:, t] = game.rewards(state, r, phase)

    if not np.isfinite(rewards).all():
        raise InternalError("non-finite reward")
    return Batch(game, specs, state, keys, actions, rewards, tuple(tables), tuple(phases),
                 np.array(round_of_step), list(opponent_ids) if opponent_ids else [])


def _sample(game, state, r, phase, seat, keys, groups, seeds, t) -> np.ndarray:
    n_actions = game.tables[phase.table].n_actions
    out = np.empty(len(keys), dtype=np.int64)
    for policy, idx in groups:
        ctx = DecisionContext(game, state, r, phase.name, seat, idx)
        p = np.asarray(policy.probs(phase.table, keys[idx], ctx), dtype=np.float64)
        if p.shape != (len(idx), n_actions):
            raise InternalError(f"{policy.name} returned probabilities of shape {p.shape}")
        if (np.abs(p.sum(axis=1) - 1.0) > 1e-9).any() or (p < 0).any():
            raise InternalError(f"{policy.name} emitted an invalid probability vector")
        u = uniforms(seeds[idx], ACTION_TAG, t)
        a = (np.cumsum(p, axis=1) <= u[:, None]).sum(axis=1)
        out[idx] = np.minimum(a, n_actions - 1)
    return out


def run_episode(spec: EpisodeSpec, policy_1: Policy, policy_2: Policy, opponent_id: str = "self") -> Trajectory:
    """Play a single episode; deterministic given the spec's seeds and the policies."""
    game = policy_1.game
    if spec.env_id != game.env_id:
        raise ConfigurationError(f"policy for {game.env_id.value} cannot play {spec.env_id.value}")
    return run_batch(game, [spec], policy_1, policy_2, [opponent_id]).trajectory(0)


# ---------------------------------------------------------------- returns

@dataclass
class ReturnSeries:
    returns: np.ndarray  # (T, 2)
    gamma: float
    norm_constant: float


def _check_return_args(gamma, norm_constant):
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if not norm_constant > 0:
        raise ValueError(f"normalisation constant must be positive, got {norm_constant}")


def discounted_returns(rewards: np.ndarray, round_of_step: np.ndarray, gamma: float,
                       norm_constant: float = 1.0) -> np.ndarray:
    """Returns-to-go along axis -2 (time) with one discount factor per round.

    ``rewards`` has shape (..., T, seats).  Steps inside a round are not
    discounted relative to each other.
    """
    _check_return_args(gamma, norm_constant)
    r = np.asarray(rewards, dtype=np.float64) / norm_constant
    out = np.zeros_like(r)
    n_steps = r.shape[-2]
    carry = np.zeros(r.shape[:-2] + r.shape[-1:])
    for t in range(n_steps - 1, -1, -1):
        if t + 1 < n_steps and round_of_step[t + 1] != round_of_step[t]:
            carry = gamma * carry
        carry = r[..., t, :] + carry
        out[..., t, :] = carry
    return out


def returns_to_go(traj: Trajectory, gamma: float, norm_constant: float) -> ReturnSeries:
    return ReturnSeries(discounted_returns(traj.rewards, traj.round_index, gamma, norm_constant),
                        gamma, norm_constant)


# ------------------------------------------------------------ transcripts

def transcript_records(traj: Trajectory, game: Game) -> list[dict]:
    """One record per decision: round, phase, seat, observation, action, reward."""
    out = []
    for t in range(traj.length):
        for seat in (0, 1):
            key = traj.obs[seat][t]
            out.append({
                "round": int(traj.round_index[t]),
                "phase": traj.phases[t],
                "seat": seat,
                "obs": key if isinstance(key, str) else list(key),
                "action": game.action_label(traj.tables[t], int(traj.actions[t, seat])),
                "reward": float(traj.rewards[t, seat]),
            })
    return out


def write_transcript(trajectories, game: Game, fh) -> None:
    """Line-delimited JSON, one decision per line, episodes tagged by env seed."""
    for traj in trajectories:
        for rec in transcript_records(traj, game):
            rec = {"env_seed": traj.spec.env_seed, "opponent": traj.opponent_id, **rec}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
