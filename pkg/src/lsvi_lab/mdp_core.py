"""Finite episodic linear MDPs: construction, validation, sampling, misspecification.

Steps are 0-indexed internally (``h = 0 .. H-1``); the feature index of a
state-action pair in the tabular embedding is ``x * A + a``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

FEATURE_NORM_TOL = 1e-12
ROW_SUM_TOL = 1e-9
NONNEG_TOL = 1e-12
NORM_BOUND_TOL = 1e-9


class SpecError(ValueError):
    """Base class for malformed MDP inputs."""


class RowNotStochastic(SpecError):
    pass


class RewardOutOfRange(SpecError):
    pass


class IndexOutOfRange(IndexError):
    pass


def rng_stream(seed: int, *counters: int) -> np.random.Generator:
    """Independent Philox stream keyed by ``(seed, *counters)``.

    Used with ``(experiment seed, episode, step)`` so that parallel sweeps
    and reruns draw identical numbers regardless of execution order.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(c) for c in counters)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class FeatureMap:
    """Feature table ``phi(x, a)`` stored as an ``(S, A, d)`` array."""

    table: np.ndarray

    def __post_init__(self):
        table = np.array(self.table, dtype=np.float64)
        if table.ndim != 3:
            raise SpecError(f"feature table must have shape (S, A, d), got {table.shape}")
        if not np.all(np.isfinite(table)):
            raise SpecError("feature table contains non-finite entries")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def num_states(self) -> int:
        return self.table.shape[0]

    @property
    def num_actions(self) -> int:
        return self.table.shape[1]

    @property
    def dim(self) -> int:
        return self.table.shape[2]

    def __call__(self, x: int, a: int) -> np.ndarray:
        return self.table[x, a]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.table, axis=-1)


@dataclass(frozen=True)
class LinearMdpSpec:
    """Exactly linear MDP: ``P_h(.|x,a) = phi(x,a)^T mu_h``, ``r_h = phi^T theta_h``.

    ``mu`` has shape ``(H, d, S)`` and ``theta`` has shape ``(H, d)``.
    """

    features: FeatureMap
    horizon: int
    mu: np.ndarray
    theta: np.ndarray
    lambda_reg: float = 1.0

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        theta = np.array(self.theta, dtype=np.float64)
        S, d, H = self.features.num_states, self.features.dim, int(self.horizon)
        if H < 1:
            raise SpecError("horizon must be >= 1")
        if mu.shape != (H, d, S):
            raise SpecError(f"mu must have shape {(H, d, S)}, got {mu.shape}")
        if theta.shape != (H, d):
            raise SpecError(f"theta must have shape {(H, d)}, got {theta.shape}")
        if not self.lambda_reg > 0:
            raise SpecError("lambda must be positive")
        mu.setflags(write=False)
        theta.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "horizon", H)

    @property
    def num_states(self) -> int:
        return self.features.num_states

    @property
    def num_actions(self) -> int:
        return self.features.num_actions

    @property
    def dim(self) -> int:
        return self.features.dim

    def transition_table(self) -> np.ndarray:
        """``(H, S, A, S)`` array of ``phi(x,a)^T mu_h``."""
        return np.einsum("xad,hds->hxas", self.features.table, self.mu)

    def reward_table(self) -> np.ndarray:
        """``(H, S, A)`` array of ``phi(x,a)^T theta_h``."""
        return np.einsum("xad,hd->hxa", self.features.table, self.theta)


@dataclass(frozen=True)
class GroundTruthMdp:
    """Exact tabular dynamics that are only approximately linear.

    ``p_exact`` has shape ``(H, S, A, S)``, ``r_exact`` has shape ``(H, S, A)``.
    """

    features: FeatureMap
    horizon: int
    p_exact: np.ndarray
    r_exact: np.ndarray
    linear_surrogate: LinearMdpSpec
    zeta: float = 0.0

    def __post_init__(self):
        p = np.array(self.p_exact, dtype=np.float64)
        r = np.array(self.r_exact, dtype=np.float64)
        H, S, A = self.horizon, self.features.num_states, self.features.num_actions
        if p.shape != (H, S, A, S) or r.shape != (H, S, A):
            raise SpecError("ground-truth tables have inconsistent shapes")
        _check_stochastic(p)
        _check_rewards(r)
        p.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "p_exact", p)
        object.__setattr__(self, "r_exact", r)

    @property
    def num_states(self) -> int:
        return self.features.num_states

    @property
    def num_actions(self) -> int:
        return self.features.num_actions

    @property
    def dim(self) -> int:
        return self.features.dim

    @property
    def lambda_reg(self) -> float:
        return self.linear_surrogate.lambda_reg

    def transition_table(self) -> np.ndarray:
        return self.p_exact

    def reward_table(self) -> np.ndarray:
        return self.r_exact


Mdp = Union[LinearMdpSpec, GroundTruthMdp]


def as_ground_truth(mdp: Mdp) -> GroundTruthMdp:
    """View any MDP as exact tables; a linear spec becomes a zero-error ground truth."""
    if isinstance(mdp, GroundTruthMdp):
        return mdp
    return GroundTruthMdp(
        features=mdp.features,
        horizon=mdp.horizon,
        p_exact=_clean_rows(mdp.transition_table()),
        r_exact=np.clip(mdp.reward_table(), 0.0, 1.0),
        linear_surrogate=mdp,
        zeta=0.0,
    )


def _clean_rows(p: np.ndarray) -> np.ndarray:
    # round-off from phi^T mu may leave -1e-17 entries
    p = np.clip(p, 0.0, None)
    return p / p.sum(axis=-1, keepdims=True)


def _check_stochastic(p: np.ndarray) -> None:
    sums = p.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > ROW_SUM_TOL)
    if bad.size:
        raise RowNotStochastic(f"row {tuple(bad[0])} sums to {sums[tuple(bad[0])]!r}")
    if np.any(p < -NONNEG_TOL):
        idx = tuple(np.argwhere(p < -NONNEG_TOL)[0])
        raise RowNotStochastic(f"negative transition probability at {idx}")


def _check_rewards(r: np.ndarray) -> None:
    if np.any(r < 0.0) or np.any(r > 1.0) or not np.all(np.isfinite(r)):
        raise RewardOutOfRange("rewards must lie in [0, 1]")


def embed_tabular(P, r, H: int, lambda_reg: float = 1.0) -> LinearMdpSpec:
    """Embed a tabular MDP with canonical-basis features (``d = S * A``).

    ``P`` has shape ``(H, S, A, S)`` and ``r`` has shape ``(H, S, A)``.
    """
    P = np.asarray(P, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if P.ndim != 4 or P.shape[0] != H or P.shape[1] != P.shape[3]:
        raise SpecError(f"P must have shape (H, S, A, S), got {P.shape}")
    _, S, A, _ = P.shape
    if r.shape != (H, S, A):
        raise SpecError(f"r must have shape {(H, S, A)}, got {r.shape}")
    _check_stochastic(P)
    _check_rewards(r)
    d = S * A
    table = np.eye(d).reshape(S, A, d)
    mu = P.reshape(H, d, S)
    theta = r.reshape(H, d)
    return LinearMdpSpec(FeatureMap(table), H, mu, theta, lambda_reg)


def random_tabular_mdp(S: int, A: int, H: int, rng: np.random.Generator,
                       lambda_reg: float = 1.0) -> LinearMdpSpec:
    P = rng.dirichlet(np.ones(S), size=(H, S, A))
    r = rng.uniform(0.0, 1.0, size=(H, S, A))
    return embed_tabular(P, r, H, lambda_reg)


def make_simplex_mdp(S: int, A: int, d: int, H: int, rng: np.random.Generator,
                     lambda_reg: float = 1.0) -> LinearMdpSpec:
    """Random linear MDP whose features lie on the probability simplex.

    Each ``e_i^T mu_h`` is a probability vector over states, so any convex
    combination ``phi^T mu_h`` is a distribution.  Rewards use ``theta_h``
    entries in ``[0, 1]``.
    """
    if d < 2:
        raise SpecError("simplex features need d >= 2")
    if min(S, A, H) < 1:
        raise SpecError("S, A, H must be positive")
    table = rng.dirichlet(np.ones(d), size=(S, A))
    mu = rng.dirichlet(np.ones(S), size=(H, d))
    theta = rng.uniform(0.0, 1.0, size=(H, d))
    return LinearMdpSpec(FeatureMap(table), H, mu, theta, lambda_reg)


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind: str, where, observed: float, bound: float) -> None:
        self.violations.append({"kind": kind, "where": where,
                                "observed": float(observed), "bound": float(bound)})

    def __str__(self) -> str:
        if self.ok:
            return "OK: no violations"
        lines = [f"{len(self.violations)} violation(s):"]
        for v in self.violations:
            lines.append(f"  {v['kind']} at {v['where']}: observed {v['observed']:.6g}, "
                         f"bound {v['bound']:.6g}")
        return "\n".join(lines)


def validate_spec(spec: LinearMdpSpec) -> ValidationReport:
    """Check the normalization and probability-measure conditions of a linear MDP.

    Only aggregate conditions on ``phi^T mu_h`` are checked; individual
    entries of ``mu_h`` may be negative (signed measures).
    """
    report = ValidationReport()
    S, A, d, H = spec.num_states, spec.num_actions, spec.dim, spec.horizon

    norms = spec.features.norms()
    for x, a in np.argwhere(norms > 1.0 + FEATURE_NORM_TOL):
        report.add("feature_norm", (int(x), int(a)), norms[x, a], 1.0)

    P = spec.transition_table()
    sums = P.sum(axis=-1)
    for h, x, a in np.argwhere(np.abs(sums - 1.0) > ROW_SUM_TOL):
        report.add("transition_mass", (int(h), int(x), int(a)), sums[h, x, a], 1.0)
    for h, x, a, s in np.argwhere(P < -NONNEG_TOL):
        report.add("transition_negative", (int(h), int(x), int(a), int(s)), P[h, x, a, s], 0.0)

    R = spec.reward_table()
    for h, x, a in np.argwhere((R < 0.0) | (R > 1.0)):
        bound = 0.0 if R[h, x, a] < 0.0 else 1.0
        report.add("reward_range", (int(h), int(x), int(a)), R[h, x, a], bound)

    root_d = np.sqrt(d)
    mass_norms = np.linalg.norm(spec.mu.sum(axis=-1), axis=-1)
    theta_norms = np.linalg.norm(spec.theta, axis=-1)
    for h in range(H):
        if mass_norms[h] > root_d + NORM_BOUND_TOL:
            report.add("mu_mass_norm", (h,), mass_norms[h], root_d)
        if theta_norms[h] > root_d + NORM_BOUND_TOL:
            report.add("theta_norm", (h,), theta_norms[h], root_d)
    return report


def sample_transition(mdp: Mdp, h: int, x: int, a: int, rng: np.random.Generator) -> int:
    """Draw the successor of ``(x, a)`` at step ``h`` by inverse-CDF sampling.

    Consumes exactly one uniform draw from ``rng``.
    """
    H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    if not (0 <= h < H and 0 <= x < S and 0 <= a < A):
        raise IndexOutOfRange(f"(h={h}, x={x}, a={a}) outside [0,{H})x[0,{S})x[0,{A})")
    if isinstance(mdp, GroundTruthMdp):
        row = mdp.p_exact[h, x, a]
    else:
        row = mdp.features.table[x, a] @ mdp.mu[h]
    cdf = np.cumsum(row)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), S - 1))


def tv_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Half-L1 distance along the last axis."""
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def measure_zeta(gt: GroundTruthMdp) -> float:
    surrogate = gt.linear_surrogate
    tv = tv_distance(gt.p_exact, surrogate.transition_table())
    gap = np.abs(gt.r_exact - surrogate.reward_table())
    return float(max(tv.max(), gap.max()))


def perturb_to_misspecified(spec: LinearMdpSpec, zeta_target: float,
                            rng: np.random.Generator) -> GroundTruthMdp:
    """Mix each linear transition row with a random distribution and jitter rewards.

    Rows become ``(1 - z) p_lin + z q`` with ``q`` random, which moves each row
    by at most ``z`` in TV; rewards move by ``U[-z, z]`` before clipping to
    ``[0, 1]``.  All random draws are made before scaling by ``z``, so the same
    ``rng`` state gives perturbations in a common direction for every level.
    """
    if not 0.0 <= zeta_target <= 1.0:
        raise SpecError("zeta_target must lie in [0, 1]")
    H, S, A = spec.horizon, spec.num_states, spec.num_actions
    q = rng.dirichlet(np.full(S, 0.3), size=(H, S, A))
    noise = rng.uniform(-1.0, 1.0, size=(H, S, A))

    p_lin = spec.transition_table()
    p = (1.0 - zeta_target) * p_lin + zeta_target * q
    p = np.clip(p, 0.0, None)
    p /= p.sum(axis=-1, keepdims=True)
    r = np.clip(spec.reward_table() + zeta_target * noise, 0.0, 1.0)

    gt = GroundTruthMdp(spec.features, H, p, r, spec, 0.0)
    return GroundTruthMdp(spec.features, H, p, r, spec, measure_zeta(gt))


# --- JSON serialization -------------------------------------------------------

def spec_to_dict(mdp: Mdp) -> dict:
    spec = mdp.linear_surrogate if isinstance(mdp, GroundTruthMdp) else mdp
    out = {
        "S": spec.num_states,
        "A": spec.num_actions,
        "d": spec.dim,
        "H": spec.horizon,
        "features": spec.features.table.ravel().tolist(),
        "mu": [m.ravel().tolist() for m in spec.mu],
        "theta": [t.tolist() for t in spec.theta],
        "lambda": float(spec.lambda_reg),
    }
    if isinstance(mdp, GroundTruthMdp):
        out["ground_truth"] = {
            "p_exact": mdp.p_exact.ravel().tolist(),
            "r_exact": mdp.r_exact.ravel().tolist(),
            "zeta": float(mdp.zeta),
        }
    return out


def spec_from_dict(doc: dict) -> Mdp:
    try:
        S, A, d, H = (int(doc[k]) for k in ("S", "A", "d", "H"))
        table = np.asarray(doc["features"], dtype=np.float64).reshape(S, A, d)
        mu = np.asarray(doc["mu"], dtype=np.float64).reshape(H, d, S)
        theta = np.asarray(doc["theta"], dtype=np.float64).reshape(H, d)
        lam = float(doc.get("lambda", 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"malformed spec document: {exc}") from exc
    spec = LinearMdpSpec(FeatureMap(table), H, mu, theta, lam)
    gt = doc.get("ground_truth")
    if gt is None:
        return spec
    try:
        p = np.asarray(gt["p_exact"], dtype=np.float64).reshape(H, S, A, S)
        r = np.asarray(gt["r_exact"], dtype=np.float64).reshape(H, S, A)
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"malformed ground_truth block: {exc}") from exc
    return GroundTruthMdp(spec.features, H, p, r, spec, float(gt.get("zeta", 0.0)))


def dump_spec(mdp: Mdp, path) -> None:
    # json writes floats with repr(), which round-trips IEEE doubles exactly
    Path(path).write_text(json.dumps(spec_to_dict(mdp)))


def load_spec(path) -> Mdp:
    """Read a spec file; ``json.JSONDecodeError`` propagates with its byte offset."""
    return spec_from_dict(json.loads(Path(path).read_text()))
