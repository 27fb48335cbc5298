"""Executable checks of the proof-layer quantities behind LSVI-UCB.

Deterministic inequalities (weight norms, elliptical potentials, log-det
telescoping, the misspecification noise bound) must hold with zero
violations.  Probabilistic statements (optimism, self-normalized
concentration) are compared with their nominal failure probability plus a
three-sigma binomial margin.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import dp_oracle
from .mdp_core import GroundTruthMdp, LinearMdpSpec, as_ground_truth, load_spec

SLACK = 1e-9


class MissingCheckpoints(RuntimeError):
    pass


class NotExactlyLinear(ValueError):
    pass


def binomial_margin(p: float, n: int) -> float:
    return 3.0 * math.sqrt(p * (1.0 - p) / n)


# --- optimism -----------------------------------------------------------------

@dataclass
class OptimismResult:
    rate: float
    violations: int
    total: int
    first_violation: Optional[tuple] = None


def check_optimism(q_tables, oracle: dp_oracle.OracleValues, zeta: float = 0.0) -> OptimismResult:
    """Fraction of ``(k, h, x, a)`` with ``Q^k_h(x, a) < Q*_h(x, a) - allowance - 1e-9``.

    The allowance is ``4 H (H + 1 - h) zeta`` for step ``h`` (1-indexed), which
    is zero for exactly linear runs.
    """
    if q_tables is None:
        raise MissingCheckpoints("per-episode Q tables were not recorded")
    q = np.asarray(q_tables)
    H = oracle.horizon
    steps_left = H - np.arange(H)  # H + 1 - h for 1-indexed h
    allowance = 4.0 * H * steps_left * zeta
    lower = oracle.q_star - allowance[:, None, None] - SLACK
    bad = q < lower[None]
    n_bad = int(bad.sum())
    first = tuple(int(i) for i in np.argwhere(bad)[0]) if n_bad else None
    return OptimismResult(n_bad / bad.size, n_bad, int(bad.size), first)


# --- elliptical potentials ----------------------------------------------------

def elliptical_potential(phis, lam: float) -> tuple[float, int]:
    """``(sum_i phi_i^T Lambda_t^{-1} phi_i, d)`` with ``Lambda_t`` built from the same ``phis``."""
    phis = np.atleast_2d(np.asarray(phis, dtype=np.float64))
    d = phis.shape[1]
    if phis.shape[0] == 0:
        return 0.0, d
    gram = lam * np.eye(d) + phis.T @ phis
    sol = np.linalg.solve(gram, phis.T)
    return float(np.einsum("ij,ji->", phis, sol)), d


def sequential_potentials(phis, lam: float) -> np.ndarray:
    """``phi_k^T Lambda_{k-1}^{-1} phi_k`` with ``Lambda_{k-1}`` from the first ``k-1`` vectors.

    Computed with fresh dense solves, independent of any incremental inverse.
    """
    phis = np.atleast_2d(np.asarray(phis, dtype=np.float64))
    n, d = phis.shape
    out = np.zeros(n)
    gram = lam * np.eye(d)
    for i in range(n):
        out[i] = phis[i] @ np.linalg.solve(gram, phis[i])
        gram += np.outer(phis[i], phis[i])
    return out


def bonus_sum_bound(phis, lam: float) -> tuple[float, float]:
    """``(sum_k phi_k^T (Lambda^k)^{-1} phi_k, 2 d log((lam + K) / lam))`` for one step."""
    phis = np.asarray(phis, dtype=np.float64)
    if phis.size == 0:
        return 0.0, 0.0
    phis = np.atleast_2d(phis)
    K, d = phis.shape
    observed = float(sequential_potentials(phis, lam).sum())
    return observed, 2.0 * d * math.log((lam + K) / lam)


def log_det_telescoping(phis, lam: float) -> tuple[float, float, float]:
    """``(log det ratio, potential sum, 2 * log det ratio)``; the middle lies between the outer two
    whenever ``lam >= 1`` and ``||phi|| <= 1``."""
    phis = np.atleast_2d(np.asarray(phis, dtype=np.float64))
    d = phis.shape[1]
    gram = lam * np.eye(d) + phis.T @ phis
    logdet = np.linalg.slogdet(gram)[1] - d * math.log(lam)
    pot = float(sequential_potentials(phis, lam).sum())
    return float(logdet), pot, float(2.0 * logdet)


def weight_norm_check(weights, H: int, lam: float) -> dict:
    """Check ``||w_h^k|| <= 2 H sqrt(d k / lam)`` for every recorded ``(k, h)``."""
    w = np.asarray(weights)
    K, _, d = w.shape
    norms = np.linalg.norm(w, axis=-1)
    bound = 2.0 * H * np.sqrt(d * np.arange(1, K + 1) / lam)[:, None]
    viol = int((norms > bound + SLACK).sum())
    ratio = float((norms / bound).max()) if K else 0.0
    return {"violations": viol, "max_ratio": ratio}


# --- self-normalized concentration -------------------------------------------

def self_normalized_mc(d: int, k: int, sigma: float, lam: float, delta: float, trials: int,
                       rng: np.random.Generator, noise: str = "gaussian") -> float:
    """Violation frequency of the self-normalized bound at time ``k``.

    Features are adapted: each direction leans towards the sign of the running
    noise sum.  ``noise="uniform"`` draws ``U[-sigma, sigma]``, which is
    ``sigma``-sub-Gaussian; ``sigma = 0`` gives zero noise.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    S = np.zeros((trials, d))
    gram = np.repeat((lam * np.eye(d))[None], trials, axis=0)
    running = np.zeros(trials)
    e1 = np.zeros(d)
    e1[0] = 1.0
    for _ in range(k):
        g = rng.standard_normal((trials, d)) + np.sign(running)[:, None] * e1
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        phi = g * rng.uniform(0.0, 1.0, size=(trials, 1))
        if noise == "gaussian":
            eps = sigma * rng.standard_normal(trials)
        elif noise == "uniform":
            eps = rng.uniform(-sigma, sigma, size=trials)
        else:
            raise ValueError(f"unknown noise family {noise!r}")
        S += phi * eps[:, None]
        gram += phi[:, :, None] * phi[:, None, :]
        running += eps
    lhs = np.einsum("ti,ti->t", S, np.linalg.solve(gram, S[:, :, None])[:, :, 0])
    logdet = np.linalg.slogdet(gram)[1]
    rhs = 2.0 * sigma**2 * (0.5 * logdet - 0.5 * d * math.log(lam) - math.log(delta))
    return float(np.mean(lhs > rhs + SLACK))


# --- covering number ----------------------------------------------------------

def covering_bound(d: int, L: float, B: float, lam: float, eps: float) -> float:
    """Upper bound on the log eps-covering number of the optimistic value class."""
    if min(d, L, B, lam, eps) <= 0:
        raise ValueError("all parameters must be positive")
    return d * math.log(1.0 + 4.0 * L / eps) + d * d * math.log(
        1.0 + 8.0 * math.sqrt(d) * B * B / (lam * eps * eps))


# --- transition decomposition -------------------------------------------------

@dataclass
class DecompositionResult:
    sample_gap: float       # max |(P_hat - P_bar) V| over visited pairs
    linear_gap: float       # max |(P_bar - P) V| over visited pairs
    linear_gap_bound_ok: bool
    max_bound_ratio: float


def empirical_bellman_decomposition(spec: LinearMdpSpec, h: int, states, actions, next_states,
                                    V, lam: float) -> DecompositionResult:
    """Split ``P_hat V - P V`` at step ``h`` into a sampling part and a regularization part.

    ``states``, ``actions``, ``next_states`` are the first ``k - 1`` transitions
    observed at step ``h``; ``V`` is a value vector over states.
    """
    if isinstance(spec, GroundTruthMdp):
        if spec.zeta > 0:
            raise NotExactlyLinear("decomposition needs an exactly linear MDP")
        spec = spec.linear_surrogate
    table = spec.features.table
    d = spec.dim
    V = np.asarray(V, dtype=np.float64)
    states = np.asarray(states, dtype=np.intp)
    actions = np.asarray(actions, dtype=np.intp)
    next_states = np.asarray(next_states, dtype=np.intp)
    if states.size == 0:
        return DecompositionResult(0.0, 0.0, True, 0.0)

    P = spec.transition_table()[h]          # (S, A, S)
    PV = P @ V                               # (S, A)
    phis = table[states, actions]            # (n, d)
    gram = lam * np.eye(d) + phis.T @ phis
    hat_vec = phis.T @ V[next_states]
    bar_vec = phis.T @ PV[states, actions]

    pairs = np.unique(np.stack([states, actions], axis=1), axis=0)
    q_phi = table[pairs[:, 0], pairs[:, 1]]  # (m, d)
    sol = np.linalg.solve(gram, q_phi.T).T   # rows: Lambda^{-1} phi
    hat = sol @ hat_vec
    bar = sol @ bar_vec
    true = PV[pairs[:, 0], pairs[:, 1]]

    width = np.sqrt(np.maximum(np.einsum("md,md->m", q_phi, sol), 0.0))
    vmax = float(np.abs(V).max())
    bound = 2.0 * vmax * math.sqrt(d * lam) * width
    gap2 = np.abs(bar - true)
    ok = bool(np.all(gap2 <= bound + SLACK))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, gap2 / bound, 0.0)
    return DecompositionResult(float(np.abs(hat - bar).max()), float(gap2.max()), ok,
                               float(ratio.max()))


def misspecification_noise_check(gt: GroundTruthMdp, h: int, states, actions, V, lam: float) -> dict:
    """Cauchy-Schwarz bound on the adversarial model-error term at step ``h``.

    The residuals are ``r - phi^T theta + (P - P_lin) V`` on the visited pairs;
    the check is ``|phi^T Lambda^{-1} sum phi_tau eps_tau| <= B sqrt(d k phi^T Lambda^{-1} phi)``
    for every state-action pair, with ``B`` the largest residual magnitude.
    """
    spec = gt.linear_surrogate
    table = gt.features.table
    d = gt.dim
    states = np.asarray(states, dtype=np.intp)
    actions = np.asarray(actions, dtype=np.intp)
    n = states.size
    if n == 0:
        return {"violations": 0, "max_ratio": 0.0, "B": 0.0}
    V = np.asarray(V, dtype=np.float64)
    resid = (gt.r_exact[h] - spec.reward_table()[h]
             + (gt.p_exact[h] - spec.transition_table()[h]) @ V)[states, actions]
    B = float(np.abs(resid).max())
    phis = table[states, actions]
    gram = lam * np.eye(d) + phis.T @ phis
    all_phi = table.reshape(-1, d)
    sol = np.linalg.solve(gram, all_phi.T).T
    lhs = np.abs(sol @ (phis.T @ resid))
    k = n + 1
    rhs = B * np.sqrt(d * k * np.maximum(np.einsum("md,md->m", all_phi, sol), 0.0))
    viol = int((lhs > rhs + SLACK).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / rhs, 0.0)
    return {"violations": viol, "max_ratio": float(ratio.max()), "B": B}


# --- reports ------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    observed: float
    bound: float
    detail: str = ""

    @property
    def slack(self) -> float:
        return self.bound - self.observed


@dataclass
class DiagnosticsReport:
    checks: list = field(default_factory=list)

    def add(self, name, passed, observed, bound, detail=""):
        self.checks.append(Check(name, bool(passed), float(observed), float(bound), detail))

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"ok": self.ok,
                "checks": [dict(asdict(c), slack=c.slack) for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        width = max((len(c.name) for c in self.checks), default=10)
        lines = [f"{'check':<{width}}  status  {'observed':>12}  {'bound':>12}  detail"]
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            lines.append(f"{c.name:<{width}}  {status:<6}  {c.observed:>12.6g}  {c.bound:>12.6g}  {c.detail}")
        return "\n".join(lines)


def deterministic_flags(result) -> dict:
    """Quick pass/fail flags for the deterministic bounds of a finished in-memory run."""
    agent = result.agent
    if agent is None:
        return {}
    lam, H = agent.lam, agent.H
    flags = {"weight_norm": weight_norm_check(result.arrays["weights"], H, lam)["violations"] == 0}
    pot_ok, tel_ok = True, True
    K = result.arrays["potentials"].shape[0]
    for h in range(H):
        obs, d = elliptical_potential(agent.history_phi[h], lam)
        pot_ok &= obs <= d + SLACK
        observed = float(result.arrays["potentials"][:, h].sum())
        tel_ok &= observed <= 2.0 * d * math.log((lam + K) / lam) + SLACK
    flags["elliptical_potential"] = bool(pot_ok)
    flags["bonus_sum"] = bool(tel_ok)
    return flags


def diagnose_arrays(mdp, arrays: dict, config: dict, report: Optional[DiagnosticsReport] = None,
                    self_normalized_trials: int = 1000) -> DiagnosticsReport:
    """Run every diagnostic over recorded run arrays (see ``harness.write_run_dir``)."""
    report = report or DiagnosticsReport()
    gt = as_ground_truth(mdp)
    spec = gt.linear_surrogate
    lam = float(config.get("lambda_reg", 1.0))
    p = float(config.get("p", 0.01))
    H, d = gt.horizon, gt.dim
    oracle = dp_oracle.optimal_values(gt)

    q_tables = arrays.get("q_tables")
    if q_tables is None:
        raise MissingCheckpoints("run has no per-episode Q tables; rerun with --checkpoints every-k")
    opt = check_optimism(q_tables, oracle, gt.zeta)
    bound = p + binomial_margin(p, opt.total)
    report.add("optimism_rate", opt.rate <= bound, opt.rate, bound,
               f"{opt.violations}/{opt.total} cells below Q*")

    wn = weight_norm_check(arrays["weights"], H, lam)
    report.add("weight_norm", wn["violations"] == 0, wn["max_ratio"], 1.0,
               f"max ||w||/(2H sqrt(dk/lam)); {wn['violations']} violations")

    phi = arrays["history_phi"]
    K = arrays["weights"].shape[0]
    for h in range(H):
        obs, dd = elliptical_potential(phi[h], lam)
        report.add(f"elliptical_potential[h={h + 1}]", obs <= dd + SLACK, obs, dd)
        seq = sequential_potentials(phi[h], lam)
        observed, tb = float(seq.sum()), 2.0 * d * math.log((lam + K) / lam)
        report.add(f"bonus_sum[h={h + 1}]", observed <= tb + SLACK, observed, tb)
        recorded = float(arrays["potentials"][:, h].sum())
        report.add(f"bonus_sum_recorded[h={h + 1}]", abs(recorded - observed) <= 1e-6 * max(1.0, observed),
                   abs(recorded - observed), 1e-6 * max(1.0, observed),
                   "incremental vs dense potentials")

    states, actions, nexts = arrays["history_state"], arrays["history_action"], arrays["history_next"]
    if gt.zeta > 0:
        for h in range(H):
            res = misspecification_noise_check(gt, h, states[h], actions[h], oracle.v_star[h + 1], lam)
            report.add(f"misspec_noise[h={h + 1}]", res["violations"] == 0, res["max_ratio"], 1.0,
                       f"B={res['B']:.4g}")
    else:
        for h in range(H):
            dec = empirical_bellman_decomposition(spec, h, states[h], actions[h], nexts[h],
                                                  oracle.v_star[h + 1], lam)
            report.add(f"linear_gap_bound[h={h + 1}]", dec.linear_gap_bound_ok, dec.max_bound_ratio, 1.0,
                       f"sample gap {dec.sample_gap:.4g}, linear gap {dec.linear_gap:.4g}")

    betas = arrays.get("betas")
    B = float(np.max(betas)) if betas is not None and len(betas) else 1.0
    L = 2.0 * H * math.sqrt(d * K / lam)
    eps = 1.0 / max(K, 1)
    cov = covering_bound(d, L, max(B, 1e-12), lam, eps)
    report.add("covering_bound", math.isfinite(cov), cov, float("inf"),
               f"log N_eps at L={L:.4g}, B={B:.4g}, eps={eps:.4g}")

    if self_normalized_trials:
        rng = np.random.Generator(np.random.Philox(int(config.get("seed", 0)) & 0xFFFFFFFF))
        delta = max(p, 0.05)
        freq = self_normalized_mc(d, 50, 1.0, lam, delta, self_normalized_trials, rng)
        sb = delta + binomial_margin(delta, self_normalized_trials)
        report.add("self_normalized", freq <= sb, freq, sb, f"delta={delta}")
    return report


def diagnose_run_dir(run_dir) -> DiagnosticsReport:
    run_dir = Path(run_dir)
    config = json.loads((run_dir / "config.json").read_text())
    mdp = load_spec(run_dir / "mdp.json")
    with np.load(run_dir / "checkpoints.npz") as data:
        arrays = {k: data[k] for k in data.files}
    return diagnose_arrays(mdp, arrays, config)
