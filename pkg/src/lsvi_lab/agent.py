"""Optimistic least-squares value iteration (LSVI-UCB) on a finite feature table."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .mdp_core import FeatureMap


# successors per block when recomputing regression targets
_TARGET_BLOCK = 256


class TrajectoryLengthMismatch(ValueError):
    pass


def iota(d: int, T: int, p: float) -> float:
    """Log factor ``log(2 d T / p)`` used by both bonus schedules."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    return math.log(2.0 * d * T / p)


@dataclass(frozen=True)
class FixedBonus:
    beta: float

    def __call__(self, k: int) -> float:
        return float(self.beta)

    @classmethod
    def from_theory(cls, c: float, d: int, H: int, T: int, p: float) -> "FixedBonus":
        return cls(c * d * H * math.sqrt(iota(d, T, p)))


@dataclass(frozen=True)
class MisspecifiedBonus:
    """``beta_k = c (d sqrt(iota) + zeta sqrt(k d)) H``; grows with the episode index."""

    c: float
    d: int
    H: int
    iota: float
    zeta: float

    def __call__(self, k: int) -> float:
        if k < 1:
            raise ValueError("episode index starts at 1")
        return self.c * (self.d * math.sqrt(self.iota) + self.zeta * math.sqrt(k * self.d)) * self.H


def beta(schedule, k: int) -> float:
    return schedule(k)


def sherman_morrison_update(inv: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Inverse of ``M + phi phi^T`` given ``inv = M^{-1}`` (symmetric)."""
    u = inv @ phi
    denom = 1.0 + phi @ u
    out = inv - np.outer(u, u) / denom
    return 0.5 * (out + out.T)


class LsviUcbAgent:
    """LSVI-UCB with full target recomputation every episode.

    Steps are 0-indexed.  History for step ``h`` is kept in preallocated
    arrays; ``update_episode`` appends one transition per step and then
    refits all weights backward from the last step, recomputing every past
    target ``r + max_a Q_{h+1}(x', a)`` with the current estimates.
    """

    def __init__(self, features: FeatureMap, horizon: int, schedule, lambda_reg: float = 1.0,
                 capacity: int = 1024):
        self.features = features
        self.H = int(horizon)
        self.schedule = schedule
        self.lam = float(lambda_reg)
        d = features.dim
        self.d = d
        self.k = 1
        self.gram_inv = np.repeat((np.eye(d) / self.lam)[None], self.H, axis=0)
        self.w = np.zeros((self.H, d))
        self.n = 0
        self._phi = np.zeros((self.H, capacity, d))
        self._reward = np.zeros((self.H, capacity))
        self._next = np.zeros((self.H, capacity), dtype=np.intp)
        self._state = np.zeros((self.H, capacity), dtype=np.intp)
        self._action = np.zeros((self.H, capacity), dtype=np.intp)

    # -- history views -------------------------------------------------------
    @property
    def history_phi(self) -> np.ndarray:
        return self._phi[:, : self.n]

    @property
    def history_reward(self) -> np.ndarray:
        return self._reward[:, : self.n]

    @property
    def history_next(self) -> np.ndarray:
        return self._next[:, : self.n]

    @property
    def history_state(self) -> np.ndarray:
        return self._state[:, : self.n]

    @property
    def history_action(self) -> np.ndarray:
        return self._action[:, : self.n]

    @property
    def beta(self) -> float:
        return self.schedule(self.k)

    def _grow(self):
        cap = self._phi.shape[1] * 2
        for name in ("_phi", "_reward", "_next", "_state", "_action"):
            old = getattr(self, name)
            new = np.zeros((old.shape[0], cap) + old.shape[2:], dtype=old.dtype)
            new[:, : self.n] = old[:, : self.n]
            setattr(self, name, new)

    # -- Q evaluation --------------------------------------------------------
    def _q_from_feats(self, h: int, feats: np.ndarray, b: float) -> np.ndarray:
        mean = feats @ self.w[h]
        quad = np.einsum("...i,...i->...", feats @ self.gram_inv[h], feats)
        return np.minimum(mean + b * np.sqrt(np.maximum(quad, 0.0)), self.H)

    def q_value(self, h: int, x: int, a: int) -> float:
        return float(self._q_from_feats(h, self.features.table[x, a], self.beta))

    def q_table(self) -> np.ndarray:
        """``(H, S, A)`` optimistic Q estimates for the current episode."""
        b = self.beta
        return np.stack([self._q_from_feats(h, self.features.table, b) for h in range(self.H)])

    def bonus(self, h: int, x: int, a: int) -> float:
        phi = self.features.table[x, a]
        return self.beta * math.sqrt(max(phi @ self.gram_inv[h] @ phi, 0.0))

    def select_action(self, h: int, x: int) -> int:
        # np.argmax returns the first maximiser, i.e. lowest action index on ties
        return int(np.argmax(self._q_from_feats(h, self.features.table[x], self.beta)))

    def greedy_policy(self) -> np.ndarray:
        return np.argmax(self.q_table(), axis=-1)

    # -- learning ------------------------------------------------------------
    def update_episode(self, trajectory) -> None:
        """Absorb one episode and refit for the next one.

        ``trajectory`` is a sequence of ``H`` tuples ``(x, a, r, x_next)``.
        """
        if len(trajectory) != self.H:
            raise TrajectoryLengthMismatch(f"expected {self.H} transitions, got {len(trajectory)}")
        if self.n == self._phi.shape[1]:
            self._grow()
        i = self.n
        table = self.features.table
        for h, (x, a, r, x_next) in enumerate(trajectory):
            phi = table[x, a]
            self._phi[h, i] = phi
            self._reward[h, i] = r
            self._next[h, i] = x_next
            self._state[h, i] = x
            self._action[h, i] = a
            self.gram_inv[h] = sherman_morrison_update(self.gram_inv[h], phi)
        self.n += 1
        self.k += 1
        self._refit()

    def _refit(self) -> None:
        for h in range(self.H - 1, -1, -1):
            targets = self.regression_targets(h)
            self.w[h] = self.gram_inv[h] @ (self._phi[h, : self.n].T @ targets)

    def regression_targets(self, h: int) -> np.ndarray:
        """``r + max_a Q_{h+1}(x', a)`` for every stored step-``h`` transition, under current estimates."""
        n = self.n
        targets = self._reward[h, :n].copy()
        if h + 1 < self.H:
            # O(n A d^2): evaluate Q_{h+1} at every stored successor for every action.
            # Blocked so the (block, A, d) temporaries stay cache resident as n grows.
            b = self.beta
            table = self.features.table
            nxt = self._next[h, :n]
            for lo in range(0, n, _TARGET_BLOCK):
                hi = min(lo + _TARGET_BLOCK, n)
                targets[lo:hi] += self._q_from_feats(h + 1, table[nxt[lo:hi]], b).max(axis=-1)
        return targets

    def checkpoint(self) -> dict:
        return {
            "k": self.k,
            "beta": self.beta,
            "lambda": self.lam,
            "steps": [
                {"w": self.w[h].tolist(), "gram_inverse": self.gram_inv[h].ravel().tolist(),
                 "history_length": self.n}
                for h in range(self.H)
            ],
        }

    def checkpoint_json(self) -> str:
        return json.dumps(self.checkpoint())
