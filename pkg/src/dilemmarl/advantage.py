"""Leave-one-out group advantages and the Advantage Alignment surrogate."""

from __future__ import annotations

import numpy as np


def loo_advantages(group_returns, axis: int = 0) -> np.ndarray:
    """Subtract from each member's return the mean return of the other members.

    Group members lie along ``axis``; every other entry (time, seat, group)
    is baselined independently.
    """
    g = np.asarray(group_returns, dtype=np.float64)
    k = g.shape[axis]
    if k < 2:
        raise ValueError("leave-one-out baseline needs at least two group members")
    # the baseline is shift invariant; centring on one member makes identical
    # returns cancel exactly instead of up to rounding
    g = g - np.take(g, [0], axis=axis)
    others = (g.sum(axis=axis, keepdims=True) - g) / (k - 1)
    return g - others


def shaping_carry(a_self, gamma: float) -> np.ndarray:
    """``S_t = sum_{k<t} gamma**(t-k) * a_self[k]`` along the last axis.

    Computed by the recursion ``S_0 = 0``, ``S_t = gamma * (S_{t-1} + a_self[t-1])``.
    """
    a = np.asarray(a_self, dtype=np.float64)
    s = np.zeros_like(a)
    for t in range(1, a.shape[-1]):
        s[..., t] = gamma * (s[..., t - 1] + a[..., t - 1])
    return s


def align_advantages(a_self, a_opp, beta: float, gamma: float, outer_gamma: bool = True) -> np.ndarray:
    """Opponent-shaping surrogate ``A_self_t + beta * gamma * A_opp_t * S_t``.

    The last axis is the round index.  ``outer_gamma=False`` drops the
    factor ``gamma`` that multiplies the shaping term as a whole (the inner
    discount inside ``S_t`` is always kept).
    """
    a_self = np.asarray(a_self, dtype=np.float64)
    a_opp = np.asarray(a_opp, dtype=np.float64)
    if a_self.shape != a_opp.shape:
        raise ValueError(f"advantage shapes differ: {a_self.shape} vs {a_opp.shape}")
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if beta == 0:
        return a_self.copy()
    scale = beta * gamma if outer_gamma else beta
    return a_self + scale * a_opp * shaping_carry(a_self, gamma)
