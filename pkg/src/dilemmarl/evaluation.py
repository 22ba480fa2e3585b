"""Cross-play matrices, behavioural probes and exploitability reports."""

from __future__ import annotations

import csv
import json
import math
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Batch, make_eval_specs, run_batch
from .envs import EnvId, Game, HANDS, MESSAGES, split_allocation_arrays
from .errors import ConfigurationError
from .policy import Policy, ScriptedPolicy, builtin_policy


def play(policy_1: Policy, policy_2: Policy, n_games: int, master_seed, rounds: int = 10) -> Batch:
    """``n_games`` independent episodes with ``policy_1`` in seat 0."""
    if n_games < 1:
        raise ConfigurationError("n_games must be positive")
    game = policy_1.game
    return run_batch(game, make_eval_specs(n_games, master_seed, game.env_id, rounds), policy_1, policy_2)


def _mean_se(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[0]
    mean = x.mean(axis=0)
    se = x.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se


# ------------------------------------------------------------ cross-play

@dataclass
class CrossPlayReport:
    env_id: EnvId
    names: list[str]
    n_games: int
    rounds: int
    master_seed: int
    mean: np.ndarray      # (N, N, 2) mean per-round reward of (row seat, column seat)
    stderr: np.ndarray    # (N, N, 2)
    seeds: dict = field(default_factory=dict)   # (i, j) -> env seeds used
    traces: np.ndarray | None = None           # (N, N, R, 2) per-round means

    def entry(self, row: str, col: str) -> tuple[float, float]:
        i, j = self.names.index(row), self.names.index(col)
        return float(self.mean[i, j, 0]), float(self.mean[i, j, 1])

    def to_dict(self) -> dict:
        pairs = []
        for i, a in enumerate(self.names):
            for j, b in enumerate(self.names):
                pairs.append({
                    "seat_1": a, "seat_2": b,
                    "mean": self.mean[i, j].tolist(), "stderr": self.stderr[i, j].tolist(),
                    "n": self.n_games, "env_seeds": [str(s) for s in self.seeds.get((i, j), [])],
                    "per_round": self.traces[i, j].tolist() if self.traces is not None else None,
                })
        return {"env": self.env_id.value, "roster": self.names, "n_games": self.n_games,
                "rounds": self.rounds, "master_seed": self.master_seed, "pairs": pairs}

    def write(self, out_dir) -> list[Path]:
        """``matrix.csv`` (row policy's reward vs column policy), ``pairs.csv``, ``report.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "matrix.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + self.names)
            for i, a in enumerate(self.names):
                w.writerow([a] + [repr(float(self.mean[i, j, 0])) for j in range(len(self.names))])
        with (out / "pairs.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seat_1", "seat_2", "mean_1", "mean_2", "stderr_1", "stderr_2", "n"])
            for i, a in enumerate(self.names):
                for j, b in enumerate(self.names):
                    w.writerow([a, b, *(repr(float(x)) for x in self.mean[i, j]),
                                *(repr(float(x)) for x in self.stderr[i, j]), self.n_games])
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return [out / "matrix.csv", out / "pairs.csv", out / "report.json"]


def cross_play(roster: Sequence, env_id=None, n_games: int = 100, rounds: int = 10,
               master_seed: int = 0) -> CrossPlayReport:
    """Every ordered pair of the roster (self-pairs included) over ``n_games`` games.

    ``roster`` holds policies or ``(name, policy)`` pairs.  Seeds are drawn
    once for the whole matrix so no two pairs share an episode.
    """
    entries = [(p.name, p) if isinstance(p, Policy) else (p[0], p[1]) for p in roster]
    if not entries:
        raise ConfigurationError("empty roster")
    game = entries[0][1].game
    env = EnvId.parse(env_id) if env_id is not None else game.env_id
    for name, p in entries:
        if p.game.env_id != env or not p.game.same_as(game):
            raise ConfigurationError(f"policy {name} is not compatible with {env.value}")
    if n_games < 1:
        raise ConfigurationError("n_games must be positive")
    n = len(entries)
    specs = make_eval_specs(n * n * n_games, master_seed, env, rounds)
    mean = np.zeros((n, n, 2))
    stderr = np.zeros((n, n, 2))
    traces = np.zeros((n, n, rounds, 2))
    seeds = {}
    for i, (_, a) in enumerate(entries):
        for j, (_, b) in enumerate(entries):
            chunk = specs[(i * n + j) * n_games:(i * n + j + 1) * n_games]
            batch = run_batch(game, chunk, a, b)
            rr = batch.round_rewards()
            mean[i, j], stderr[i, j] = _mean_se(rr.mean(axis=1))
            traces[i, j] = rr.mean(axis=0)
            seeds[(i, j)] = [s.env_seed for s in chunk]
    return CrossPlayReport(env, [e[0] for e in entries], n_games, rounds, master_seed,
                           mean, stderr, seeds, traces)


# ---------------------------------------------------------------- probes

@dataclass
class ProbeStats:
    name: str
    n_games: int
    stats: dict
    per_round: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.stats[key]

    def to_dict(self) -> dict:
        return {"probe": self.name, "n_games": self.n_games, "stats": self.stats, "per_round": self.per_round}

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "probe.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        with (out / "probe.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["statistic", "value"])
            for k, v in self.stats.items():
                w.writerow([k, repr(v) if isinstance(v, float) else v])
        return [out / "probe.json", out / "probe.csv"]


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else float("nan")


def reciprocity_probe_ipd(policy: Policy, n_games: int = 500, master_seed: int = 0,
                          rounds: int = 10) -> ProbeStats:
    """Play against a uniformly random opponent and measure conditional responses."""
    if policy.env_id != EnvId.IPD:
        raise ConfigurationError("reciprocity probe needs an IPD policy")
    batch = play(policy, builtin_policy("UNIFORM_RANDOM", policy.game), n_games, master_seed, rounds)
    own = batch.actions[:, 1:, 0]
    opp_prev = batch.actions[:, :-1, 1]
    after_d = opp_prev == 1
    after_c = ~after_d
    return ProbeStats("reciprocity", n_games, {
        "p_defect_after_defect": _ratio((own[after_d] == 1).sum(), after_d.sum()),
        "p_coop_after_coop": _ratio((own[after_c] == 0).sum(), after_c.sum()),
        "first_round_coop": float((batch.actions[:, 0, 0] == 0).mean()),
        "n_after_defect": int(after_d.sum()),
        "n_after_coop": int(after_c.sum()),
    })


def _split_trigger_opponent(game: Game, trigger_round: int) -> ScriptedPolicy:
    coop = builtin_policy("ALWAYS_COOP", game)
    defect = builtin_policy("ALWAYS_DEFECT", game)

    def fn(table, keys, ctx):
        src = defect if ctx.round == trigger_round else coop
        return src.probs(table, keys, ctx)

    return ScriptedPolicy(game, fn, f"COOP_WITH_DEFECTION_AT_{trigger_round}")


def grim_probe_split(policy: Policy, n_games: int = 500, master_seed: int = 0, rounds: int = 10,
                     trigger_round: int = 2) -> ProbeStats:
    """Opponent cooperates, defects once at ``trigger_round``, then cooperates again.

    Reports the probed policy's greedy rate per round, and averaged over
    rounds up to the trigger (pre) and after it (post).
    """
    if policy.env_id != EnvId.SPLIT:
        raise ConfigurationError("grim probe needs a Split No-Comm policy")
    if not 0 <= trigger_round < rounds - 1:
        raise ConfigurationError("trigger round must leave at least one later round")
    game = policy.game
    batch = play(policy, _split_trigger_opponent(game, trigger_round), n_games, master_seed, rounds)
    rates = [float(game.greedy(batch.state, r, 0).mean()) for r in range(rounds)]
    return ProbeStats("grim", n_games, {
        "pre_trigger_greedy_rate": float(np.mean(rates[: trigger_round + 1])),
        "post_trigger_greedy_rate": float(np.mean(rates[trigger_round + 1:])),
        "min_post_trigger_greedy_rate": float(np.min(rates[trigger_round + 1:])),
        "trigger_round": trigger_round,
    }, {"greedy_rate": rates})


def tas_proposal_stats(batch: Batch) -> dict:
    """Proposal-by-hand, honesty and welfare statistics of a Trust-and-Split batch."""
    game = batch.game
    st = batch.state
    upper = st.upper
    props = st.proposals
    seat_is_upper = np.stack([upper == 0, upper == 1], axis=-1)
    honest = st.messages == _message_of_hand(st.hands)
    silent = st.messages == MESSAGES.index("SILENT")
    rr = batch.round_rewards()
    collective = rr.sum(axis=-1)
    qa, qb = split_allocation_arrays(game.coins, props[..., 0], props[..., 1])
    values = np.where(seat_is_upper, game.upper_value, game.lower_value)
    implied = values[..., 0] * qa + values[..., 1] * qb
    full, defect = game.coins * game.upper_value, 0.5 * game.coins * (game.upper_value + game.lower_value)
    mean_coll = float(collective.mean())
    return {
        "mean_proposal_upper": float(props[seat_is_upper].mean()),
        "mean_proposal_lower": float(props[~seat_is_upper].mean()),
        "honesty_rate": float(honest.mean()),
        "silence_rate": float(silent.mean()),
        "mean_collective_payoff": mean_coll,
        "efficiency": (mean_coll - defect) / (full - defect),
        "raw_ratio": mean_coll / full,
        "welfare_consistent": bool(np.allclose(implied, collective, atol=1e-9)
                                   and (collective <= full + 1e-9).all()),
    }


def _message_of_hand(hands: np.ndarray) -> np.ndarray:
    lut = np.array([MESSAGES.index("SAY_" + h.upper()) for h in HANDS])
    return lut[hands]


def tas_behavior_probe(policy: Policy, n_games: int = 500, master_seed: int = 0, rounds: int = 10,
                       opponent: Policy | None = None) -> ProbeStats:
    """Self-play (or play vs ``opponent``) and summarise proposals, honesty and welfare."""
    if policy.env_id != EnvId.TAS:
        raise ConfigurationError("behaviour probe needs a Trust-and-Split policy")
    batch = play(policy, opponent or policy, n_games, master_seed, rounds)
    stats = tas_proposal_stats(batch) if opponent is None else _seat_stats(batch, 0)
    return ProbeStats("tas_behavior", n_games, stats)


def _seat_stats(batch: Batch, seat: int) -> dict:
    st = batch.state
    is_up = st.upper == seat
    props = st.proposals[..., seat]
    return {
        "mean_proposal_upper": float(props[is_up].mean()),
        "mean_proposal_lower": float(props[~is_up].mean()),
        "honesty_rate": float((st.messages[..., seat] == _message_of_hand(st.hands[..., seat])).mean()),
        "mean_reward": float(batch.round_rewards()[..., seat].mean()),
    }


def split_efficiency(policy: Policy, n_games: int = 500, master_seed: int = 0, rounds: int = 10) -> dict:
    """Self-play collective payoff relative to mutual cooperation and mutual defection.

    The three references are played on identical environment seeds.
    ``efficiency = (self - defect) / (coop - defect)``; ``raw_ratio = self / coop``.
    """
    game = policy.game
    specs = make_eval_specs(n_games, master_seed, game.env_id, rounds)
    coll = {}
    for name, a in (("self", policy), ("coop", builtin_policy("ALWAYS_COOP", game)),
                    ("defect", builtin_policy("ALWAYS_DEFECT", game))):
        coll[name] = float(run_batch(game, specs, a, a).round_rewards().sum(axis=-1).mean())
    return {
        "selfplay_collective": coll["self"],
        "coop_collective": coll["coop"],
        "defect_collective": coll["defect"],
        "efficiency": (coll["self"] - coll["defect"]) / (coll["coop"] - coll["defect"]),
        "raw_ratio": coll["self"] / coll["coop"],
    }


def self_play_reward(policy: Policy, n_games: int = 256, master_seed: int = 0, rounds: int = 10) -> float:
    """Mean per-round, per-seat reward in self-play."""
    return float(play(policy, policy, n_games, master_seed, rounds).round_rewards().mean())


def head_to_head(policy: Policy, opponent: Policy, n_games: int = 256, master_seed: int = 0,
                 rounds: int = 10) -> tuple[float, float]:
    """Mean per-round reward of (policy, opponent), averaged over both seat orders."""
    half = max(n_games // 2, 1)
    a = play(policy, opponent, half, [master_seed, 0], rounds).round_rewards().mean(axis=(0, 1))
    b = play(opponent, policy, half, [master_seed, 1], rounds).round_rewards().mean(axis=(0, 1))
    return float((a[0] + b[1]) / 2), float((a[1] + b[0]) / 2)


def default_probe(params: Policy, config, step: int) -> dict:
    """Cheap per-environment statistics logged into training curves."""
    n = config.eval_games
    seed = [config.seed, step, 2]
    env = params.env_id
    out = {"eval_selfplay_reward": self_play_reward(params, n, seed, config.rounds)}
    if env == EnvId.IPD:
        s = reciprocity_probe_ipd(params, n, seed, config.rounds).stats
        out["eval_p_defect_after_defect"] = s["p_defect_after_defect"]
        out["eval_p_coop_after_coop"] = s["p_coop_after_coop"]
    elif env == EnvId.SPLIT:
        out["eval_efficiency"] = split_efficiency(params, n, seed, config.rounds)["efficiency"]
    else:
        s = tas_behavior_probe(params, n, seed, config.rounds).stats
        out["eval_proposal_upper"] = s["mean_proposal_upper"]
        out["eval_proposal_lower"] = s["mean_proposal_lower"]
        out["eval_honesty"] = s["honesty_rate"]
    return out


# --------------------------------------------------------- exploitability

@dataclass
class ExploitReport:
    frozen: str
    env_id: EnvId
    threshold: float
    selfplay_level: float
    seeds: list[int]
    final_frozen: list[float]
    final_learner: list[float]
    drops: list[float]
    verdicts: list[str]
    trajectories: list[list[float]]
    aborted: list

    @property
    def verdict(self) -> str:
        exploited = sum(v == "EXPLOITABLE" for v in self.verdicts)
        return "EXPLOITABLE" if exploited * 2 > len(self.verdicts) else "NOT EXPLOITABLE"

    @property
    def mean_drop(self) -> float:
        return float(np.mean(self.drops))

    def to_dict(self) -> dict:
        return {
            "frozen": self.frozen, "env": self.env_id.value, "threshold": self.threshold,
            "selfplay_level": self.selfplay_level, "verdict": self.verdict, "mean_drop": self.mean_drop,
            "per_seed": [
                {"seed": s, "final_frozen_reward": f, "final_learner_reward": l, "drop": d,
                 "verdict": v, "aborted": a}
                for s, f, l, d, v, a in zip(self.seeds, self.final_frozen, self.final_learner,
                                             self.drops, self.verdicts, self.aborted)
            ],
            "frozen_reward_trajectories": self.trajectories,
        }

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "exploit.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        with (out / "exploit.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "final_frozen_reward", "final_learner_reward", "drop", "verdict"])
            for row in zip(self.seeds, self.final_frozen, self.final_learner, self.drops, self.verdicts):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), row[4]])
        with (out / "frozen_trajectory.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step"] + [f"seed_{s}" for s in self.seeds])
            for t in range(max(len(tr) for tr in self.trajectories) if self.trajectories else 0):
                w.writerow([t + 1] + [repr(tr[t]) if t < len(tr) else "" for tr in self.trajectories])
        return [out / "exploit.json", out / "exploit.csv", out / "frozen_trajectory.csv"]


def _exploit_one(frozen: Policy, config, seed: int, eval_games: int, eval_seed: int):
    from .training import train_vs_frozen

    res = train_vs_frozen(config.replace(seed=int(seed)), frozen)
    learner_r, frozen_r = head_to_head(res.params, frozen, eval_games, [eval_seed, 1, int(seed)], config.rounds)
    return learner_r, frozen_r, [rec["opponent_reward"] for rec in res.curve], res.aborted


def _picklable(obj) -> bool:
    try:
        pickle.dumps(obj)
    except Exception:
        return False
    return True


def exploitability_report(frozen: Policy, config, seeds: Sequence[int] = (0, 1, 2),
                          threshold: float = 0.15, eval_games: int = 512,
                          eval_seed: int = 7, workers: int = 1) -> ExploitReport:
    """Train a naive learner against ``frozen`` once per seed and compare the
    frozen policy's final reward with its self-play level.

    Seeds run in a process pool when ``workers > 1``; results are identical
    to the serial path because every run depends only on its own seed.
    """
    if len(seeds) < 1:
        raise ConfigurationError("need at least one learner seed")
    if not 0 < threshold < 1:
        raise ConfigurationError("threshold must lie in (0, 1)")
    level = self_play_reward(frozen, eval_games, [eval_seed, 0], config.rounds)
    jobs = [(frozen, config, int(s), eval_games, eval_seed) for s in seeds]
    if workers > 1 and len(jobs) > 1 and _picklable(frozen):
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            outcomes = list(pool.map(_exploit_one, *zip(*jobs)))
    else:
        outcomes = [_exploit_one(*job) for job in jobs]
    finals, learners, drops, verdicts, trajs, aborted = [], [], [], [], [], []
    for learner_r, frozen_r, traj, abort in outcomes:
        drop = 1.0 - frozen_r / level if level > 0 else float(frozen_r < level)
        finals.append(frozen_r)
        learners.append(learner_r)
        drops.append(drop)
        verdicts.append("EXPLOITABLE" if drop > threshold else "NOT EXPLOITABLE")
        trajs.append(traj)
        aborted.append(abort)
    return ExploitReport(frozen.name, frozen.env_id, threshold, level, [int(s) for s in seeds],
                         finals, learners, drops, verdicts, trajs, aborted)
