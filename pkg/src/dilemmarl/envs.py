"""The three social-dilemma games.

Each game is written twice over the same rules: small scalar helpers
(``ipd_payoff``, ``split_allocation``, the ``encode_obs_*`` functions) that
operate on one decision, and a batched :class:`Game` that advances many
episodes in lockstep with numpy.  The batched encoders return integer indices
into the game's key tables; ``Table.keys[idx]`` recovers the same tuple the
scalar encoder produces.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InternalError, InvalidProposalError
from .rng import ENV_TAG, SeedStream, uniforms


class EnvId(str, enum.Enum):
    IPD = "IPD"
    SPLIT = "SplitNoComm"
    TAS = "TrustAndSplit"

    @classmethod
    def parse(cls, value) -> "EnvId":
        if isinstance(value, EnvId):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "ipd": cls.IPD,
            "splitnocomm": cls.SPLIT,
            "split": cls.SPLIT,
            "trustandsplit": cls.TAS,
            "tas": cls.TAS,
        }
        if key not in aliases:
            raise ConfigurationError(
                f"unknown environment {value!r}; expected one of {[e.value for e in cls]}"
            )
        return aliases[key]


# --------------------------------------------------------------------- IPD

C, D = 0, 1
IPD_ACTIONS = ("C", "D")
IPD_PAYOFF_TABLE = np.array([[[3.0, 3.0], [0.0, 5.0]], [[5.0, 0.0], [1.0, 1.0]]])


def _ipd_action(a) -> int:
    if isinstance(a, str):
        if a not in IPD_ACTIONS:
            raise ValueError(f"IPD action must be 'C' or 'D', got {a!r}")
        return IPD_ACTIONS.index(a)
    a = int(a)
    if a not in (C, D):
        raise ValueError(f"IPD action index must be 0 or 1, got {a}")
    return a


def ipd_payoff(action_1, action_2) -> tuple[float, float]:
    """Per-round payoffs for the two seats: (C,C)=(3,3), (C,D)=(0,5), (D,D)=(1,1)."""
    r = IPD_PAYOFF_TABLE[_ipd_action(action_1), _ipd_action(action_2)]
    return float(r[0]), float(r[1])


@dataclass(frozen=True)
class IpdRound:
    actions: tuple[str, str]
    payoffs: tuple[float, float]


# --------------------------------------------------------------- split rule

def split_allocation(q: float, p_a: float, p_b: float) -> tuple[float, float]:
    """Proportional split: each side gets ``q * p / max(q, p_a + p_b)``.

    Proposals are honoured exactly when they are jointly feasible and rationed
    pro rata otherwise.
    """
    if q <= 0:
        raise InvalidProposalError(f"quantity must be positive, got {q}")
    for p in (p_a, p_b):
        if not (0 <= p <= q):
            raise InvalidProposalError(f"proposal {p} outside [0, {q}]")
    denom = max(q, p_a + p_b)
    return q * p_a / denom, q * p_b / denom


def split_allocation_arrays(q, p_a: np.ndarray, p_b: np.ndarray):
    denom = np.maximum(q, p_a + p_b)
    return q * p_a / denom, q * p_b / denom


# ----------------------------------------------------------- item values

CATEGORIES = ("hats", "books", "balls")
RELATIONS = ("higher", "equal", "lower")
OPP_LABELS = ("NONE", "COOP", "GREEDY")


def _valid_value_pairs() -> tuple:
    pairs = []
    for count in (1, 2):
        subsets = list(itertools.combinations(range(3), count))
        for sa in subsets:
            for sb in subsets:
                if sa == sb:
                    continue
                va = tuple(10 if k in sa else 1 for k in range(3))
                vb = tuple(10 if k in sb else 1 for k in range(3))
                pairs.append((va, vb))
    return tuple(pairs)


# 12 ordered pairs: 6 with one 10-valued category each, 6 with two.
VALID_VALUE_PAIRS = _valid_value_pairs()
_VALUE_PAIR_ARRAY = np.array(VALID_VALUE_PAIRS, dtype=np.float64)  # (12, 2, 3)


def _value_counter(round_index: int) -> int:
    return 4 * round_index


def sample_item_values(stream: SeedStream, round_index: int = 0):
    """Draw ``(values_a, values_b)`` for one round, uniformly over the valid pairs."""
    u = stream.draw(_value_counter(round_index))
    idx = min(int(u * len(VALID_VALUE_PAIRS)), len(VALID_VALUE_PAIRS) - 1)
    return VALID_VALUE_PAIRS[idx]


@dataclass(frozen=True)
class SplitRound:
    values: tuple[tuple, tuple]
    proposals: tuple[tuple, tuple]
    allocations: tuple[tuple, tuple] = ()
    payoffs: tuple[float, float] = ()


def is_greedy_split(values, proposals, actor: int, threshold: float = 5) -> bool:
    """Did ``actor`` claim more than ``threshold`` of a category it values 1 and the other 10?"""
    other = 1 - actor
    return any(
        values[actor][k] == 1 and values[other][k] == 10 and proposals[actor][k] > threshold
        for k in range(3)
    )


def encode_obs_split(values, history: Sequence[SplitRound], seat: int, greedy_threshold: float = 5):
    """Key ``(rel_hats, rel_books, rel_balls, opponent_label)`` for ``seat``."""
    own, opp = values[seat], values[1 - seat]
    rels = tuple(
        "higher" if own[k] > opp[k] else "equal" if own[k] == opp[k] else "lower" for k in range(3)
    )
    if not history:
        label = "NONE"
    else:
        last = history[-1]
        label = "GREEDY" if is_greedy_split(last.values, last.proposals, 1 - seat, greedy_threshold) else "COOP"
    return rels + (label,)


# ----------------------------------------------------------------- hands

HANDS = ("rock", "paper", "scissors")
BEATS = {"rock": "scissors", "paper": "rock", "scissors": "paper"}
HAND_PAIRS = tuple((a, b) for a in HANDS for b in HANDS if a != b)
MESSAGES = ("SAY_ROCK", "SAY_PAPER", "SAY_SCISSORS", "SILENT")
ABSENT = "ABSENT"
_BEATS_IDX = np.array([HANDS.index(BEATS[h]) for h in HANDS])
_HAND_PAIR_ARRAY = np.array([[HANDS.index(a), HANDS.index(b)] for a, b in HAND_PAIRS])


def upper_seat(hand_1: str, hand_2: str) -> int:
    """Index (0 or 1) of the seat whose hand wins under rock-paper-scissors."""
    if hand_1 == hand_2:
        raise ValueError("hands must be distinct")
    return 0 if BEATS[hand_1] == hand_2 else 1


def _hand_counter(round_index: int) -> int:
    return 4 * round_index + 1


def sample_hands(stream: SeedStream, round_index: int):
    """Uniform over the 6 ordered distinct hand pairs; returns ``(hand_1, hand_2, upper)``."""
    u = stream.draw(_hand_counter(round_index))
    idx = min(int(u * len(HAND_PAIRS)), len(HAND_PAIRS) - 1)
    h1, h2 = HAND_PAIRS[idx]
    return h1, h2, upper_seat(h1, h2)


@dataclass(frozen=True)
class TasRound:
    """One Trust-and-Split round as seen in a transcript.

    ``messages`` and ``proposals`` hold ``None`` for decisions not yet taken.
    """

    hands: tuple[str, str]
    first_speaker: int
    messages: tuple = (None, None)
    proposals: tuple = (None, None)
    payoffs: tuple = ()

    @property
    def upper(self) -> int:
        return upper_seat(*self.hands)


def encode_obs_tas(current: TasRound, phase: str, history: Sequence[TasRound], seat: int,
                   greedy_threshold: float = 5):
    """Message-phase or proposal-phase key for ``seat``.

    message:  (own hand, first|second, opponent message or ABSENT, label)
    proposal: (own hand, opponent message, label)
    """
    own_hand = current.hands[seat]
    opp = 1 - seat
    if not history:
        label = "NONE"
    else:
        last = history[-1]
        greedy = last.upper != opp and last.proposals[opp] >= greedy_threshold
        label = "GREEDY" if greedy else "COOP"
    if phase == "message":
        if seat == current.first_speaker:
            return (own_hand, "first", ABSENT, label)
        if current.messages[opp] is None:
            raise InternalError("second speaker asked to talk before the first speaker")
        return (own_hand, "second", current.messages[opp], label)
    if phase == "proposal":
        if current.messages[0] is None or current.messages[1] is None:
            raise InternalError("proposal requested before both messages were sent")
        return (own_hand, current.messages[opp], label)
    raise ValueError(f"unknown phase {phase!r}")


# ------------------------------------------------------- IPD observations

def _ipd_key_from_code(code: int, length: int) -> tuple:
    parts = []
    for i in range(length):
        pair = (code // 4 ** i) % 4
        parts += [IPD_ACTIONS[pair // 2], IPD_ACTIONS[pair % 2]]
    return tuple(parts)


def encode_obs_ipd(history, seat: int, memory: int = 1, grim_bit: bool = False):
    """``"FIRST"`` on round 0, else (own, opp) of the last ``memory`` rounds, most recent first.

    ``history`` is a sequence of (seat-0 action, seat-1 action) pairs.  With
    ``grim_bit`` a trailing ``"GRIM"`` marks an opponent that ever defected.
    """
    if not history:
        return "FIRST"
    hist = [(_ipd_action(a), _ipd_action(b)) for a, b in history]
    parts = []
    for pair in reversed(hist[-memory:]):
        parts += [IPD_ACTIONS[pair[seat]], IPD_ACTIONS[pair[1 - seat]]]
    key = tuple(parts)
    if grim_bit and any(pair[1 - seat] == D for pair in hist):
        key = key + ("GRIM",)
    return key


# ------------------------------------------------------------ batched games

@dataclass
class Table:
    """Enumerated keys for one decision type and the actions available there."""

    name: str
    keys: tuple
    actions: tuple
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {k: i for i, k in enumerate(self.keys)}

    @property
    def n_keys(self) -> int:
        return len(self.keys)

    @property
    def n_actions(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class Phase:
    name: str
    table: str


class Game:
    """Batched two-seat game; subclasses define the rules."""

    env_id: EnvId
    phases: tuple[Phase, ...]
    tables: dict[str, Table]

    @property
    def steps_per_round(self) -> int:
        return len(self.phases)

    def options(self) -> dict:
        return {}

    def new_state(self, env_seeds, rounds: int):
        raise NotImplementedError

    def turn_order(self, round_index: int, phase: Phase) -> list[tuple[int, ...]]:
        return [(0, 1)]

    def keys(self, state, round_index: int, phase: Phase, seat: int) -> np.ndarray:
        raise NotImplementedError

    def record(self, state, round_index: int, phase: Phase, seat: int, actions: np.ndarray):
        raise NotImplementedError

    def rewards(self, state, round_index: int, phase: Phase) -> np.ndarray:
        raise NotImplementedError

    def env_draws(self, state) -> np.ndarray:
        """All environment randomness of a state (for seed-isolation checks)."""
        raise NotImplementedError

    def round_records(self, state, episode: int) -> list:
        raise NotImplementedError

    def action_label(self, table: str, action: int) -> str:
        return str(self.tables[table].actions[action])

    def same_as(self, other: "Game") -> bool:
        return self.env_id == other.env_id and self.options() == other.options()

    def __repr__(self):
        opts = ", ".join(f"{k}={v!r}" for k, v in self.options().items())
        return f"{type(self).__name__}({opts})"


@dataclass
class _IpdState:
    actions: np.ndarray  # (B, R, 2), -1 before the move


class IteratedPrisonersDilemma(Game):
    env_id = EnvId.IPD
    phases = (Phase("move", "move"),)

    def __init__(self, memory: int = 1, grim_bit: bool = False):
        if memory < 1:
            raise ConfigurationError("IPD memory window must be >= 1")
        self.memory = int(memory)
        self.grim_bit = bool(grim_bit)
        keys = ["FIRST"]
        self._offsets = [0, 0]
        for length in range(1, self.memory + 1):
            for code in range(4 ** length):
                base = _ipd_key_from_code(code, length)
                keys.append(base)
                if self.grim_bit:
                    keys.append(base + ("GRIM",))
            self._offsets.append(self._offsets[-1] + 4 ** length)
        self.tables = {"move": Table("move", tuple(keys), IPD_ACTIONS)}

    def options(self):
        return {"memory": self.memory, "grim_bit": self.grim_bit}

    def new_state(self, env_seeds, rounds):
        n = len(env_seeds)
        return _IpdState(actions=np.full((n, rounds, 2), -1, dtype=np.int64))

    def keys(self, state, r, phase, seat):
        n = state.actions.shape[0]
        if r == 0:
            return np.zeros(n, dtype=np.int64)
        length = min(r, self.memory)
        code = np.zeros(n, dtype=np.int64)
        for i in range(length):
            own = state.actions[:, r - 1 - i, seat]
            opp = state.actions[:, r - 1 - i, 1 - seat]
            code += (4 ** i) * (2 * own + opp)
        base = self._offsets[length] + code
        if self.grim_bit:
            flag = (state.actions[:, :r, 1 - seat] == D).any(axis=1)
            return 1 + 2 * base + flag
        return 1 + base

    def record(self, state, r, phase, seat, actions):
        state.actions[:, r, seat] = actions

    def rewards(self, state, r, phase):
        a = state.actions[:, r]
        return IPD_PAYOFF_TABLE[a[:, 0], a[:, 1]]

    def env_draws(self, state):
        return np.zeros((state.actions.shape[0], 0))

    def round_records(self, state, episode):
        out = []
        for a1, a2 in state.actions[episode]:
            if a1 < 0:
                break
            out.append(IpdRound((IPD_ACTIONS[a1], IPD_ACTIONS[a2]), ipd_payoff(a1, a2)))
        return out


@dataclass
class _SplitState:
    values: np.ndarray     # (B, R, 2, 3)
    proposals: np.ndarray  # (B, R, 2, 3), nan before the move


class SplitNoComm(Game):
    env_id = EnvId.SPLIT
    phases = (Phase("proposal", "proposal"),)

    def __init__(self, grid=(0, 5, 10), quantity: float = 10, greedy_threshold: float = 5):
        self.grid = tuple(float(g) for g in grid)
        self.quantity = float(quantity)
        self.greedy_threshold = float(greedy_threshold)
        if any(g < 0 or g > self.quantity for g in self.grid) or len(set(self.grid)) != len(self.grid):
            raise ConfigurationError(f"proposal grid {grid} must be distinct values in [0, {quantity}]")
        self.joint_proposals = np.array(list(itertools.product(self.grid, repeat=3)))
        keys = tuple(itertools.product(RELATIONS, RELATIONS, RELATIONS, OPP_LABELS))
        actions = tuple("/".join(_fmt(p) for p in row) for row in self.joint_proposals)
        self.tables = {"proposal": Table("proposal", keys, actions)}

    def options(self):
        return {"grid": [_fmt(g) for g in self.grid], "quantity": _fmt(self.quantity),
                "greedy_threshold": _fmt(self.greedy_threshold)}

    def new_state(self, env_seeds, rounds):
        n = len(env_seeds)
        values = np.empty((n, rounds, 2, 3))
        for r in range(rounds):
            u = uniforms(env_seeds, ENV_TAG, _value_counter(r))
            idx = np.minimum((u * len(VALID_VALUE_PAIRS)).astype(np.int64), len(VALID_VALUE_PAIRS) - 1)
            values[:, r] = _VALUE_PAIR_ARRAY[idx]
        return _SplitState(values=values, proposals=np.full((n, rounds, 2, 3), np.nan))

    def greedy(self, state, r: int, actor: int) -> np.ndarray:
        """Per-episode flag: did ``actor`` play greedily in round ``r``."""
        v = state.values[:, r]
        conflict = (v[:, actor] == 1) & (v[:, 1 - actor] == 10)
        return (conflict & (state.proposals[:, r, actor] > self.greedy_threshold)).any(axis=1)

    def keys(self, state, r, phase, seat):
        own = state.values[:, r, seat]
        opp = state.values[:, r, 1 - seat]
        rel = np.where(own > opp, 0, np.where(own == opp, 1, 2))
        if r == 0:
            label = np.zeros(len(own), dtype=np.int64)
        else:
            label = 1 + self.greedy(state, r - 1, 1 - seat).astype(np.int64)
        return ((rel[:, 0] * 3 + rel[:, 1]) * 3 + rel[:, 2]) * 3 + label

    def record(self, state, r, phase, seat, actions):
        state.proposals[:, r, seat] = self.joint_proposals[actions]

    def rewards(self, state, r, phase):
        p = state.proposals[:, r]
        qa, qb = split_allocation_arrays(self.quantity, p[:, 0], p[:, 1])
        v = state.values[:, r]
        return np.stack([(v[:, 0] * qa).sum(axis=1), (v[:, 1] * qb).sum(axis=1)], axis=1)

    def env_draws(self, state):
        return state.values.reshape(state.values.shape[0], -1)

    def round_records(self, state, episode):
        out = []
        for r in range(state.values.shape[1]):
            p = state.proposals[episode, r]
            if np.isnan(p).any():
                break
            v = state.values[episode, r]
            qa, qb = split_allocation_arrays(self.quantity, p[0], p[1])
            out.append(SplitRound(
                values=(tuple(int(x) for x in v[0]), tuple(int(x) for x in v[1])),
                proposals=(tuple(float(x) for x in p[0]), tuple(float(x) for x in p[1])),
                allocations=(tuple(qa.tolist()), tuple(qb.tolist())),
                payoffs=(float((v[0] * qa).sum()), float((v[1] * qb).sum())),
            ))
        return out


@dataclass
class _TasState:
    hands: np.ndarray      # (B, R, 2) hand indices
    upper: np.ndarray      # (B, R) seat holding the winning hand
    messages: np.ndarray   # (B, R, 2), -1 before sent
    proposals: np.ndarray  # (B, R, 2), nan before the move


class TrustAndSplit(Game):
    env_id = EnvId.TAS
    phases = (Phase("message", "message"), Phase("proposal", "proposal"))

    def __init__(self, grid=tuple(range(11)), coins: float = 10, greedy_threshold: float = 5,
                 upper_value: float = 10, lower_value: float = 1):
        self.grid = np.array([float(g) for g in grid])
        self.coins = float(coins)
        self.greedy_threshold = float(greedy_threshold)
        self.upper_value = float(upper_value)
        self.lower_value = float(lower_value)
        if (self.grid < 0).any() or (self.grid > self.coins).any():
            raise ConfigurationError(f"proposal grid must lie in [0, {coins}]")
        msg_keys = tuple(itertools.product(HANDS, ("first", "second"), MESSAGES + (ABSENT,), OPP_LABELS))
        prop_keys = tuple(itertools.product(HANDS, MESSAGES, OPP_LABELS))
        self.tables = {
            "message": Table("message", msg_keys, MESSAGES),
            "proposal": Table("proposal", prop_keys, tuple(_fmt(g) for g in self.grid)),
        }

    def options(self):
        return {"grid": [_fmt(g) for g in self.grid], "coins": _fmt(self.coins),
                "greedy_threshold": _fmt(self.greedy_threshold),
                "upper_value": _fmt(self.upper_value), "lower_value": _fmt(self.lower_value)}

    @staticmethod
    def first_speaker(round_index: int) -> int:
        return round_index % 2

    def turn_order(self, r, phase):
        if phase.name == "message":
            first = self.first_speaker(r)
            return [(first,), (1 - first,)]
        return [(0, 1)]

    def new_state(self, env_seeds, rounds):
        n = len(env_seeds)
        hands = np.empty((n, rounds, 2), dtype=np.int64)
        for r in range(rounds):
            u = uniforms(env_seeds, ENV_TAG, _hand_counter(r))
            idx = np.minimum((u * len(HAND_PAIRS)).astype(np.int64), len(HAND_PAIRS) - 1)
            hands[:, r] = _HAND_PAIR_ARRAY[idx]
        upper = np.where(_BEATS_IDX[hands[..., 0]] == hands[..., 1], 0, 1)
        return _TasState(hands=hands, upper=upper,
                         messages=np.full((n, rounds, 2), -1, dtype=np.int64),
                         proposals=np.full((n, rounds, 2), np.nan))

    def greedy(self, state, r: int, actor: int) -> np.ndarray:
        """Per-episode flag: ``actor`` held the lower hand in round ``r`` and still claimed."""
        return (state.upper[:, r] != actor) & (state.proposals[:, r, actor] >= self.greedy_threshold)

    def keys(self, state, r, phase, seat):
        n = state.hands.shape[0]
        opp = 1 - seat
        if r == 0:
            label = np.zeros(n, dtype=np.int64)
        else:
            label = 1 + self.greedy(state, r - 1, opp).astype(np.int64)
        hand = state.hands[:, r, seat]
        if phase.name == "message":
            if seat == self.first_speaker(r):
                pos, om = 0, np.full(n, len(MESSAGES), dtype=np.int64)
            else:
                om = state.messages[:, r, opp]
                if (om < 0).any():
                    raise InternalError("second speaker asked to talk before the first speaker")
                pos = 1
            return ((hand * 2 + pos) * (len(MESSAGES) + 1) + om) * 3 + label
        msgs = state.messages[:, r]
        if (msgs < 0).any():
            raise InternalError("proposal requested before both messages were sent")
        return (hand * len(MESSAGES) + msgs[:, opp]) * 3 + label

    def record(self, state, r, phase, seat, actions):
        if phase.name == "message":
            state.messages[:, r, seat] = actions
        else:
            state.proposals[:, r, seat] = self.grid[actions]

    def coin_values(self, state, r: int) -> np.ndarray:
        up = state.upper[:, r]
        vals = np.full((len(up), 2), self.lower_value)
        vals[np.arange(len(up)), up] = self.upper_value
        return vals

    def rewards(self, state, r, phase):
        n = state.hands.shape[0]
        if phase.name == "message":
            return np.zeros((n, 2))
        p = state.proposals[:, r]
        qa, qb = split_allocation_arrays(self.coins, p[:, 0], p[:, 1])
        return self.coin_values(state, r) * np.stack([qa, qb], axis=1)

    def env_draws(self, state):
        return state.hands.reshape(state.hands.shape[0], -1)

    def round_records(self, state, episode):
        out = []
        for r in range(state.hands.shape[1]):
            hands = tuple(HANDS[h] for h in state.hands[episode, r])
            m = state.messages[episode, r]
            p = state.proposals[episode, r]
            messages = tuple(MESSAGES[x] if x >= 0 else None for x in m)
            proposals = tuple(None if np.isnan(x) else float(x) for x in p)
            payoffs = ()
            if None not in proposals:
                qa, qb = split_allocation(self.coins, *proposals)
                up = int(state.upper[episode, r])
                v = [self.lower_value, self.lower_value]
                v[up] = self.upper_value
                payoffs = (v[0] * qa, v[1] * qb)
            out.append(TasRound(hands, self.first_speaker(r), messages, proposals, payoffs))
            if None in proposals:
                break
        return out


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def make_game(env_id, **options) -> Game:
    """Build a game from its id and option overrides (unknown options are rejected)."""
    env = EnvId.parse(env_id)
    cls = {EnvId.IPD: IteratedPrisonersDilemma, EnvId.SPLIT: SplitNoComm, EnvId.TAS: TrustAndSplit}[env]
    try:
        return cls(**options)
    except TypeError as exc:
        raise ConfigurationError(f"bad options for {env.value}: {exc}") from None
