"""Tabular softmax policies, hardcoded baselines and the snapshot buffer."""

from __future__ import annotations

import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .envs import (
    C, D, EnvId, Game, IPD_ACTIONS, MESSAGES, BEATS, make_game,
)
from .errors import ConfigurationError


BUILTIN_NAMES = ("ALWAYS_COOP", "ALWAYS_DEFECT", "TIT_FOR_TAT", "GRIM", "UNIFORM_RANDOM")


@dataclass
class DecisionContext:
    """What a scripted policy may look at besides its observation key."""

    game: Game
    state: object
    round: int
    phase: str
    seat: int
    idx: np.ndarray  # episode indices within the batch


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Policy:
    """Base class: maps observation-key indices to action distributions."""

    name = "policy"
    trainable = False

    def __init__(self, game: Game):
        self.game = game

    @property
    def env_id(self) -> EnvId:
        return self.game.env_id

    def probs(self, table: str, keys: np.ndarray, ctx: DecisionContext | None = None) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"<{type(self).__name__} {self.name} on {self.game!r}>"


class TabularPolicy(Policy):
    """Softmax over a per-key logit table (one table per decision type).

    Logits are stored densely but start at zero everywhere, which is the
    same as instantiating an unseen key lazily at zero.
    """

    trainable = True

    def __init__(self, game: Game, logits: dict | None = None, name: str = "tabular"):
        super().__init__(game)
        self.name = name
        if logits is None:
            logits = {t.name: np.zeros((t.n_keys, t.n_actions)) for t in game.tables.values()}
        for t in game.tables.values():
            arr = logits[t.name]
            if arr.shape != (t.n_keys, t.n_actions):
                raise ConfigurationError(
                    f"table {t.name!r} has shape {arr.shape}, expected {(t.n_keys, t.n_actions)}"
                )
        self.logits = logits

    def probs(self, table, keys, ctx=None):
        return softmax(self.logits[table][keys])

    def copy(self, name: str | None = None) -> "TabularPolicy":
        return TabularPolicy(self.game, {k: v.copy() for k, v in self.logits.items()}, name or self.name)

    def frozen_copy(self, name: str | None = None) -> "TabularPolicy":
        snap = self.copy(name)
        for arr in snap.logits.values():
            arr.setflags(write=False)
        return snap

    def apply_update(self, delta: "SparseGradient", scale: float = 1.0):
        for table, arr in delta.dense.items():
            self.logits[table] += scale * arr

    def equals(self, other: "TabularPolicy") -> bool:
        return self.game.same_as(other.game) and all(
            np.array_equal(self.logits[t], other.logits[t]) for t in self.logits
        )


class FixedPolicy(Policy):
    """A policy given directly by probability tables (used for the baselines)."""

    def __init__(self, game: Game, tables: dict, name: str):
        super().__init__(game)
        self.name = name
        self.tables = tables

    def probs(self, table, keys, ctx=None):
        return self.tables[table][keys]


class ScriptedPolicy(Policy):
    """A policy computed by a function of the decision context."""

    def __init__(self, game: Game, fn: Callable, name: str):
        super().__init__(game)
        self.name = name
        self.fn = fn

    def probs(self, table, keys, ctx=None):
        if ctx is None:
            raise ConfigurationError(f"scripted policy {self.name} needs a decision context")
        return self.fn(table, keys, ctx)


# ------------------------------------------------------------- gradients

class SparseGradient:
    """Partial derivatives indexed by (table, key) with one entry per action.

    Backed by dense arrays plus a visited mask; only visited keys are
    reported by :meth:`items`.
    """

    def __init__(self, game: Game, dense: dict | None = None, visited: dict | None = None):
        self.game = game
        if dense is None:
            dense = {t.name: np.zeros((t.n_keys, t.n_actions)) for t in game.tables.values()}
        if visited is None:
            visited = {name: np.any(arr != 0, axis=1) for name, arr in dense.items()}
        self.dense = dense
        self.visited = visited

    def items(self):
        for table, arr in self.dense.items():
            keys = self.game.tables[table].keys
            for i in np.flatnonzero(self.visited[table]):
                yield (table, keys[i]), arr[i]

    def get(self, table: str, key) -> np.ndarray:
        return self.dense[table][self.game.tables[table].index[key]]

    def __add__(self, other: "SparseGradient") -> "SparseGradient":
        return SparseGradient(
            self.game,
            {t: self.dense[t] + other.dense[t] for t in self.dense},
            {t: self.visited[t] | other.visited[t] for t in self.dense},
        )

    def __mul__(self, scale: float) -> "SparseGradient":
        return SparseGradient(self.game, {t: a * scale for t, a in self.dense.items()},
                              {t: v.copy() for t, v in self.visited.items()})

    __rmul__ = __mul__

    def norm(self) -> float:
        return math.sqrt(sum(float((a * a).sum()) for a in self.dense.values()))

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.dense.values())

    def __len__(self):
        return int(sum(v.sum() for v in self.visited.values()))


def _find_table(game: Game, obs, table: str | None) -> tuple[str, int]:
    if table is not None:
        return table, game.tables[table].index[obs]
    hits = [(t.name, t.index[obs]) for t in game.tables.values() if obs in t.index]
    if not hits:
        raise KeyError(f"observation {obs!r} is not a key of {game!r}")
    if len(hits) > 1:
        raise KeyError(f"observation {obs!r} is ambiguous; pass table=")
    return hits[0]


def action_distribution(params: Policy, obs, table: str | None = None) -> np.ndarray:
    """Probability vector over the actions available at ``obs``."""
    name, idx = _find_table(params.game, obs, table)
    return params.probs(name, np.array([idx]))[0]


def logprob_gradient(params: TabularPolicy, obs, action: int, table: str | None = None) -> SparseGradient:
    """d log pi(action | obs) / d logits: ``onehot(action) - pi`` at ``obs``, zero elsewhere."""
    name, idx = _find_table(params.game, obs, table)
    n_actions = params.game.tables[name].n_actions
    if not 0 <= action < n_actions:
        raise ValueError(f"action {action} out of range for {n_actions} actions")
    grad = SparseGradient(params.game)
    p = softmax(params.logits[name][idx])
    row = -p
    row[action] += 1.0
    grad.dense[name][idx] = row
    grad.visited[name][idx] = True
    return grad


def entropy_gradient(p: np.ndarray) -> np.ndarray:
    """Row-wise gradient of the Shannon entropy of softmax(logits) w.r.t. the logits."""
    logp = np.log(np.clip(p, 1e-300, None))
    h = -(p * logp).sum(axis=-1, keepdims=True)
    return -p * (logp + h)


def entropy(p: np.ndarray) -> np.ndarray:
    logp = np.log(np.clip(p, 1e-300, None))
    return -(p * logp).sum(axis=-1)


# -------------------------------------------------------------- baselines

def _one_hot_table(n_keys: int, n_actions: int, choices) -> np.ndarray:
    out = np.zeros((n_keys, n_actions))
    out[np.arange(n_keys), np.asarray(choices)] = 1.0
    return out


def _grim_ipd(table, keys, ctx: DecisionContext):
    hist = ctx.state.actions[ctx.idx, : ctx.round, 1 - ctx.seat]
    triggered = (hist == D).any(axis=1)
    out = np.zeros((len(keys), 2))
    out[np.arange(len(keys)), np.where(triggered, D, C)] = 1.0
    return out


def builtin_policy(name: str, game) -> Policy:
    """Hardcoded baselines.

    IPD: ALWAYS_COOP, ALWAYS_DEFECT, TIT_FOR_TAT, GRIM.  Split No-Comm:
    ALWAYS_COOP (claim 10 where only I value highly, 0 in the reverse case,
    5 on ties) and ALWAYS_DEFECT (claim 10 everywhere).  UNIFORM_RANDOM is
    available everywhere and is what the reciprocity probe plays against.
    Trust-and-Split has no hand-written cooperator or defector.
    """
    if not isinstance(game, Game):
        game = make_game(game)
    name = str(name).upper()
    env = game.env_id
    if name not in BUILTIN_NAMES:
        raise ConfigurationError(f"unknown builtin {name!r}; expected one of {BUILTIN_NAMES}")
    if name == "UNIFORM_RANDOM":
        return FixedPolicy(game, {t.name: np.full((t.n_keys, t.n_actions), 1.0 / t.n_actions)
                                  for t in game.tables.values()}, name)
    if env == EnvId.IPD:
        table = game.tables["move"]
        if name == "ALWAYS_COOP":
            choices = [C] * table.n_keys
        elif name == "ALWAYS_DEFECT":
            choices = [D] * table.n_keys
        elif name == "TIT_FOR_TAT":
            choices = [C if key == "FIRST" else IPD_ACTIONS.index(key[1]) for key in table.keys]
        else:
            return ScriptedPolicy(game, _grim_ipd, name)
        return FixedPolicy(game, {"move": _one_hot_table(table.n_keys, 2, choices)}, name)
    if env == EnvId.SPLIT:
        if name not in ("ALWAYS_COOP", "ALWAYS_DEFECT"):
            raise ConfigurationError(f"{name} is only defined for IPD")
        table = game.tables["proposal"]
        lookup = {tuple(row): i for i, row in enumerate(game.joint_proposals.tolist())}
        q = game.quantity
        claim = {"higher": q, "lower": 0.0, "equal": q / 2}
        choices = []
        for key in table.keys:
            want = (q, q, q) if name == "ALWAYS_DEFECT" else tuple(claim[rel] for rel in key[:3])
            if want not in lookup:
                raise ConfigurationError(f"proposal grid {game.grid} cannot express {name} proposal {want}")
            choices.append(lookup[want])
        return FixedPolicy(game, {"proposal": _one_hot_table(table.n_keys, table.n_actions, choices)}, name)
    raise ConfigurationError(
        f"{name} is not available for {env.value}: cooperators and defectors there must be trained"
    )


def truthful_cooperator(game: Game) -> FixedPolicy:
    """Trust-and-Split script: announce the true hand, then claim everything iff the
    announced opposing hand loses to ours (nothing if it wins, half if unannounced)."""
    if game.env_id != EnvId.TAS:
        raise ConfigurationError("truthful_cooperator is a Trust-and-Split script")
    msg_t, prop_t = game.tables["message"], game.tables["proposal"]
    say = {h: MESSAGES.index("SAY_" + h.upper()) for h in BEATS}
    msg_choice = [say[key[0]] for key in msg_t.keys]
    grid = list(game.grid)
    prop_choice = []
    for own, opp_msg, _ in prop_t.keys:
        if opp_msg == "SILENT":
            want = game.coins / 2
        else:
            opp_hand = opp_msg[4:].lower()
            want = game.coins if BEATS[own] == opp_hand else 0.0 if BEATS[opp_hand] == own else game.coins / 2
        prop_choice.append(int(np.argmin([abs(g - want) for g in grid])))
    return FixedPolicy(game, {
        "message": _one_hot_table(msg_t.n_keys, msg_t.n_actions, msg_choice),
        "proposal": _one_hot_table(prop_t.n_keys, prop_t.n_actions, prop_choice),
    }, "TRUTHFUL_COOPERATOR")


# ---------------------------------------------------------------- buffer

@dataclass
class AgentBuffer:
    """FIFO store of frozen policy snapshots used as past-self opponents."""

    capacity: int = 32
    cadence: int = 10
    entries: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1 or self.cadence < 1:
            raise ConfigurationError("buffer capacity and cadence must be positive")

    def __len__(self):
        return len(self.entries)

    def push(self, params: TabularPolicy, step: int):
        self.entries.append((int(step), params.frozen_copy(name=f"buffer:{int(step)}")))
        while len(self.entries) > self.capacity:
            self.entries.popleft()

    def maybe_push(self, params: TabularPolicy, step: int) -> bool:
        if step % self.cadence == 0:
            self.push(params, step)
            return True
        return False

    def steps(self) -> list[int]:
        return [s for s, _ in self.entries]

    def sample(self, rng: np.random.Generator) -> tuple[TabularPolicy, str]:
        step, snap = self.entries[int(rng.integers(len(self.entries)))]
        return snap.frozen_copy(), f"buffer:{step}"


def buffer_push(buffer: AgentBuffer, params: TabularPolicy, step: int) -> AgentBuffer:
    buffer.push(params, step)
    return buffer


def sample_opponent(buffer: AgentBuffer, current: TabularPolicy, rho: float,
                    rng: np.random.Generator) -> tuple[Policy, str]:
    """With probability ``rho`` a uniform buffer snapshot, otherwise the live policy."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    use_buffer = rng.random() < rho
    if use_buffer and len(buffer):
        return buffer.sample(rng)
    return current, "self"


# --------------------------------------------------------- serialization

POLICY_HEADER = "# dilemmarl tabular policy v1"


def _key_str(key) -> str:
    return key if isinstance(key, str) else ",".join(str(k) for k in key)


def dumps_policy(params: TabularPolicy) -> str:
    """Flat text: env header, options, then one ``key<TAB>logits`` line per non-zero row."""
    out = io.StringIO()
    out.write(POLICY_HEADER + "\n")
    out.write(f"env {params.env_id.value}\n")
    for k, v in params.game.options().items():
        out.write(f"option {k} {json.dumps(v)}\n")
    for name, table in params.game.tables.items():
        arr = params.logits[name]
        out.write(f"table {name} {table.n_keys} {table.n_actions}\n")
        for i in np.flatnonzero(np.any(arr != 0, axis=1)):
            out.write(_key_str(table.keys[i]) + "\t" + " ".join(repr(float(x)) for x in arr[i]) + "\n")
    return out.getvalue()


def loads_policy(text: str, name: str = "tabular") -> TabularPolicy:
    lines = text.splitlines()
    if not lines or lines[0].strip() != POLICY_HEADER:
        raise ConfigurationError("not a dilemmarl policy file")
    env_id, options, rows = None, {}, []
    table = None
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("env "):
            env_id = line.split(None, 1)[1].strip()
        elif line.startswith("option "):
            _, k, v = line.split(None, 2)
            options[k] = json.loads(v)
        elif line.startswith("table "):
            table = line.split()[1]
        else:
            key, values = line.split("\t")
            rows.append((table, key, [float(x) for x in values.split()]))
    if env_id is None:
        raise ConfigurationError("policy file lacks an env line")
    game = make_game(env_id, **options)
    params = TabularPolicy(game, name=name)
    lookups = {t.name: {_key_str(k): i for i, k in enumerate(t.keys)} for t in game.tables.values()}
    for table, key, values in rows:
        params.logits[table][lookups[table][key]] = values
    return params


def save_policy(params: TabularPolicy, path) -> Path:
    path = Path(path)
    path.write_text(dumps_policy(params))
    return path


def load_policy(path, name: str | None = None) -> TabularPolicy:
    path = Path(path)
    return loads_policy(path.read_text(), name=name or path.stem)
