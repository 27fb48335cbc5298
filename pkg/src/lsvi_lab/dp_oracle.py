"""Exact backward induction on finite MDPs.

Value tables carry a terminal row: ``v[H]`` is identically zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .mdp_core import GroundTruthMdp, LinearMdpSpec, Mdp


@dataclass(frozen=True)
class OracleValues:
    q_star: np.ndarray  # (H, S, A)
    v_star: np.ndarray  # (H + 1, S)

    @property
    def horizon(self) -> int:
        return self.q_star.shape[0]

    def greedy_policy(self) -> np.ndarray:
        return np.argmax(self.q_star, axis=-1)

    def to_json(self) -> str:
        return json.dumps({"q_star": self.q_star.tolist(), "v_star": self.v_star.tolist()})


def _tables(mdp: Mdp):
    return mdp.transition_table(), mdp.reward_table()


def optimal_values(mdp: Mdp) -> OracleValues:
    P, R = _tables(mdp)
    H, S, A = R.shape
    q = np.zeros((H, S, A))
    v = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        q[h] = R[h] + P[h] @ v[h + 1]
        v[h] = q[h].max(axis=-1)
    return OracleValues(q, v)


def policy_q_values(mdp: Mdp, pi) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Q^pi, V^pi)`` with shapes ``(H, S, A)`` and ``(H + 1, S)``.

    ``pi`` is an ``(H, S)`` integer table of actions.
    """
    P, R = _tables(mdp)
    H, S, A = R.shape
    pi = np.asarray(pi, dtype=np.intp)
    if pi.shape != (H, S):
        raise ValueError(f"policy table must have shape {(H, S)}, got {pi.shape}")
    q = np.zeros((H, S, A))
    v = np.zeros((H + 1, S))
    states = np.arange(S)
    for h in range(H - 1, -1, -1):
        q[h] = R[h] + P[h] @ v[h + 1]
        v[h] = q[h, states, pi[h]]
    return q, v


def policy_values(mdp: Mdp, pi) -> np.ndarray:
    return policy_q_values(mdp, pi)[1]


def policy_weights(spec: LinearMdpSpec, pi) -> np.ndarray:
    """Linear weights with ``Q^pi_h(x, a) = phi(x, a)^T w_h``; shape ``(H, d)``."""
    if isinstance(spec, GroundTruthMdp):
        raise TypeError("policy weights are only exact for linear specs")
    v = policy_values(spec, pi)
    return spec.theta + np.einsum("hds,hs->hd", spec.mu, v[1:])


def bellman_residual(mdp: Mdp, q: np.ndarray, v: np.ndarray, pi=None) -> float:
    """Max-norm residual of ``(q, v)`` against the (optimality or policy) Bellman equation."""
    P, R = _tables(mdp)
    H, S, _ = R.shape
    target_q = R + np.einsum("hxas,hs->hxa", P, v[1:])
    if pi is None:
        target_v = q.max(axis=-1)
    else:
        target_v = q[np.arange(H)[:, None], np.arange(S)[None, :], np.asarray(pi)]
    return float(max(np.abs(q - target_q).max(), np.abs(v[:H] - target_v).max(),
                     np.abs(v[H]).max()))
