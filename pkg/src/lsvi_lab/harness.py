"""Seeded experiments: exact per-episode regret, slope fits, sweeps, run-directory I/O."""
from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import dp_oracle
from .agent import FixedBonus, LsviUcbAgent, MisspecifiedBonus, iota
from .mdp_core import (
    GroundTruthMdp,
    LinearMdpSpec,
    SpecError,
    as_ground_truth,
    dump_spec,
    load_spec,
    make_simplex_mdp,
    perturb_to_misspecified,
    random_tabular_mdp,
    rng_stream,
    sample_transition,
    validate_spec,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

REGRET_SLACK = 1e-9
CSV_HEADER = ["k", "init_state", "ep_regret", "cum_regret", "beta", "max_bonus", "wall_us"]

INIT_POLICIES = ("fixed", "uniform", "adversarial")
BASELINES = ("none", "random-policy", "greedy-no-bonus")
BASELINE_ALIASES = {"random": "random-policy", "nobonus": "greedy-no-bonus"}
SCHEDULES = ("auto", "fixed", "misspecified")

# rng stream tags; the experiment seed is the first counter
_STREAM_INIT, _STREAM_STEP, _STREAM_RANDOM_POLICY = 0, 1, 2


class ConfigError(ValueError):
    pass


class DegenerateWindow(ValueError):
    pass


class NegativeRegret(AssertionError):
    pass


@dataclass
class ExperimentConfig:
    """One experiment.  ``mdp`` is ``{"spec_file": path}`` or generator params.

    Generator params: ``kind`` (``"tabular"`` or ``"simplex"``), ``S``, ``A``,
    ``H``, ``d`` (simplex only) and ``seed``.  When ``zeta > 0`` a generated
    MDP is perturbed to a ground truth at that misspecification level.
    """

    mdp: dict = field(default_factory=lambda: {"kind": "tabular", "S": 4, "A": 2, "H": 3, "seed": 0})
    K: int = 100
    lambda_reg: float = 1.0
    c: float = 1.0
    p: float = 0.01
    zeta: float = 0.0
    schedule: str = "auto"
    beta: Optional[float] = None
    init: str = "fixed"
    init_state: int = 0
    seed: int = 0
    baseline: str = "none"
    checkpoints: str = "none"
    record_wall_time: bool = False

    def __post_init__(self):
        self.baseline = BASELINE_ALIASES.get(self.baseline, self.baseline)
        self.validate()

    def validate(self) -> None:
        if int(self.K) < 1:
            raise ConfigError("K must be >= 1")
        if not 0.0 < float(self.p) < 1.0:
            raise ConfigError("p must lie in (0, 1)")
        if not float(self.lambda_reg) > 0.0:
            raise ConfigError("lambda_reg must be positive")
        if not 0.0 <= float(self.zeta) <= 1.0:
            raise ConfigError("zeta must lie in [0, 1]")
        if self.init not in INIT_POLICIES:
            raise ConfigError(f"init must be one of {INIT_POLICIES}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.checkpoints not in ("none", "every-k"):
            raise ConfigError("checkpoints must be 'none' or 'every-k'")
        if not isinstance(self.mdp, dict):
            raise ConfigError("mdp must be a table")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**copy.deepcopy(doc))

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        doc = self.to_dict()
        doc.update(changes)
        return ExperimentConfig.from_dict(doc)


def load_config(path) -> ExperimentConfig:
    """Read a JSON or TOML config.  Decode errors propagate unchanged."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".toml":
        doc = tomllib.loads(raw.decode())
    else:
        doc = json.loads(raw)
    cfg = ExperimentConfig.from_dict(doc)
    spec_file = cfg.mdp.get("spec_file")
    if spec_file is not None and not Path(spec_file).is_absolute():
        cfg.mdp["spec_file"] = str((path.parent / spec_file).resolve())
    return cfg


def build_mdp(cfg: ExperimentConfig):
    """Return ``(ground truth, linear spec)`` for the config's MDP source."""
    src = cfg.mdp
    if "spec_file" in src:
        mdp = load_spec(src["spec_file"])
    else:
        kind = src.get("kind", "tabular")
        try:
            S, A, H = int(src["S"]), int(src["A"]), int(src["H"])
        except KeyError as exc:
            raise ConfigError(f"mdp generator is missing {exc}") from exc
        rng = rng_stream(int(src.get("seed", 0)), 0)
        if kind == "tabular":
            if "d" in src and int(src["d"]) != S * A:
                raise ConfigError(f"tabular MDPs have d = S*A = {S * A}, got d = {src['d']}")
            mdp = random_tabular_mdp(S, A, H, rng, cfg.lambda_reg)
        elif kind == "simplex":
            mdp = make_simplex_mdp(S, A, int(src["d"]), H, rng, cfg.lambda_reg)
        else:
            raise ConfigError(f"unknown mdp kind {kind!r}")
        if cfg.zeta > 0:
            mdp = perturb_to_misspecified(mdp, cfg.zeta, rng_stream(int(src.get("seed", 0)), 1))
    spec = mdp.linear_surrogate if isinstance(mdp, GroundTruthMdp) else mdp
    report = validate_spec(spec)
    if not report.ok:
        raise SpecError(str(report))
    return as_ground_truth(mdp), spec


def make_schedule(cfg: ExperimentConfig, d: int, H: int, beta_override=None):
    if beta_override is not None:
        return FixedBonus(float(beta_override))
    if cfg.beta is not None:
        return FixedBonus(float(cfg.beta))
    T = cfg.K * H
    kind = cfg.schedule
    if kind == "auto":
        kind = "misspecified" if cfg.zeta > 0 else "fixed"
    if kind == "fixed":
        return FixedBonus.from_theory(cfg.c, d, H, T, cfg.p)
    return MisspecifiedBonus(cfg.c, d, H, iota(d, T, cfg.p), cfg.zeta)


@dataclass
class EpisodeRecord:
    k: int
    init_state: int
    steps: list
    ep_regret: float
    cum_regret: float
    beta: float
    max_bonus: float


@dataclass
class RunResult:
    config: dict
    policy: str
    records: list
    wall_us: list
    diagnostics: dict = field(default_factory=dict)
    # per-episode arrays: q_tables (K,H,S,A), weights (K,H,d), potentials (K,H)
    arrays: dict = field(default_factory=dict, repr=False)
    agent: Optional[LsviUcbAgent] = field(default=None, repr=False)

    @property
    def cum_regret(self) -> np.ndarray:
        return np.array([r.cum_regret for r in self.records])

    @property
    def ep_regret(self) -> np.ndarray:
        return np.array([r.ep_regret for r in self.records])


def adversarial_initial_state(oracle: dp_oracle.OracleValues, v_pi) -> int:
    """State with the largest gap ``V*_1(x) - V^pi_1(x)``; lowest index on ties.

    ``v_pi`` is either a value table (first row used) or a vector over states.
    """
    v_pi = np.asarray(v_pi)
    v1 = v_pi[0] if v_pi.ndim == 2 else v_pi
    gap = oracle.v_star[0] - v1
    # snap round-off so that numerically equal gaps tie
    gap = np.where(np.abs(gap - gap.max()) <= REGRET_SLACK, gap.max(), gap)
    return int(np.argmax(gap))


def run_experiment(cfg: ExperimentConfig, policy: str = "agent", mdp=None) -> RunResult:
    """Run one seeded experiment.

    ``policy`` is ``"agent"`` (LSVI-UCB), ``"random-policy"`` (a fresh uniformly
    random deterministic policy each episode) or ``"greedy-no-bonus"`` (LSVI
    with ``beta = 0``).
    """
    gt, spec = mdp if mdp is not None else build_mdp(cfg)
    H, S, A, d = gt.horizon, gt.num_states, gt.num_actions, gt.dim
    K = int(cfg.K)
    oracle = dp_oracle.optimal_values(gt)

    agent = None
    if policy in ("agent", "greedy-no-bonus"):
        schedule = make_schedule(cfg, d, H, 0.0 if policy == "greedy-no-bonus" else None)
        agent = LsviUcbAgent(gt.features, H, schedule, cfg.lambda_reg, capacity=K)
    elif policy != "random-policy":
        raise ConfigError(f"unknown policy {policy!r}")

    records: list[EpisodeRecord] = []
    wall: list[int] = []
    q_tables = np.zeros((K, H, S, A)) if agent else None
    weights = np.zeros((K, H, d)) if agent else None
    potentials = np.zeros((K, H))
    table = gt.features.table
    cum = 0.0

    for k in range(1, K + 1):
        t0 = time.perf_counter_ns()
        if agent is not None:
            if k > 1:
                agent.update_episode(trajectory)
            q = agent.q_table()
            pi = np.argmax(q, axis=-1)
            q_tables[k - 1] = q
            weights[k - 1] = agent.w
            b = agent.beta
        else:
            pi = rng_stream(cfg.seed, _STREAM_RANDOM_POLICY, k).integers(0, A, size=(H, S))
            b = 0.0
        v_pi = dp_oracle.policy_values(gt, pi)

        if cfg.init == "fixed":
            x = int(cfg.init_state)
        elif cfg.init == "uniform":
            x = int(rng_stream(cfg.seed, _STREAM_INIT, k).integers(0, S))
        else:
            x = adversarial_initial_state(oracle, v_pi)
        x1 = x

        trajectory = []
        max_bonus = 0.0
        for h in range(H):
            a = int(pi[h, x])
            if agent is not None:
                phi = table[x, a]
                pot = float(phi @ agent.gram_inv[h] @ phi)
                potentials[k - 1, h] = pot
                max_bonus = max(max_bonus, b * math.sqrt(max(pot, 0.0)))
            r = float(gt.r_exact[h, x, a])
            x_next = sample_transition(gt, h, x, a, rng_stream(cfg.seed, _STREAM_STEP, k, h))
            trajectory.append((x, a, r, x_next))
            x = x_next

        ep_regret = float(oracle.v_star[0, x1] - v_pi[0, x1])
        if ep_regret < -REGRET_SLACK:
            raise NegativeRegret(f"episode {k}: regret {ep_regret} < 0")
        cum += ep_regret
        wall.append((time.perf_counter_ns() - t0) // 1000)
        records.append(EpisodeRecord(k, x1, [(t[0], t[1], t[2]) for t in trajectory],
                                     ep_regret, cum, b, max_bonus))

    if agent is not None:
        # absorb the final episode so the history holds all K transitions
        agent.update_episode(trajectory)

    arrays = {"potentials": potentials}
    if agent is not None:
        arrays["q_tables"] = q_tables
        arrays["weights"] = weights
    result = RunResult(cfg.to_dict(), policy, records, wall, arrays=arrays, agent=agent)
    result.diagnostics = {"zeta_measured": float(gt.zeta), "v_star_init": float(oracle.v_star[0, cfg.init_state])}
    return result


def fit_loglog_slope(curve, window: float = 0.5) -> float:
    """OLS slope of ``log(curve[k])`` against ``log(k)`` over the trailing window.

    ``curve[0]`` corresponds to episode 1.
    """
    y = np.asarray(curve, dtype=np.float64)
    K = len(y)
    start = K - int(math.ceil(window * K))
    ks = np.arange(start + 1, K + 1, dtype=np.float64)
    tail = y[start:]
    if len(tail) < 10:
        raise DegenerateWindow(f"window holds {len(tail)} points, need >= 10")
    if np.any(tail <= 0) or not np.all(np.isfinite(tail)):
        raise DegenerateWindow("curve must be positive on the fitted window")
    slope, _ = np.polyfit(np.log(ks), np.log(tail), 1)
    return float(slope)


def safe_slope(curve, window: float = 0.5):
    try:
        return fit_loglog_slope(curve, window)
    except DegenerateWindow:
        return None


# --- output -------------------------------------------------------------------

def run_csv(result: RunResult, record_wall_time: Optional[bool] = None) -> str:
    """CSV text for a run.  ``wall_us`` is 0 unless wall-time recording is on."""
    if record_wall_time is None:
        record_wall_time = bool(result.config.get("record_wall_time", False))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for rec, us in zip(result.records, result.wall_us):
        w.writerow([rec.k, rec.init_state, repr(rec.ep_regret), repr(rec.cum_regret),
                    repr(rec.beta), repr(rec.max_bonus), us if record_wall_time else 0])
    return buf.getvalue()


def read_run_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {name: np.zeros(0) for name in CSV_HEADER}
    return {name: np.array([float(r[name]) for r in rows]) for name in CSV_HEADER}


def summarize(result: RunResult) -> dict:
    cum = result.cum_regret
    tail = result.ep_regret[-min(200, len(cum)):]
    return {
        "policy": result.policy,
        "K": len(cum),
        "terminal_regret": float(cum[-1]),
        "mean_final_regret": float(tail.mean()),
        "slope": safe_slope(cum),
        "total_wall_us": int(sum(result.wall_us)),
        "diagnostics": result.diagnostics,
    }


def write_run_dir(out, result: RunResult, mdp, baseline: Optional[RunResult] = None) -> dict:
    """Write CSV(s), summary JSON, MDP, config, agent checkpoint and history arrays."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    gt, spec = mdp
    (out / "run.csv").write_text(run_csv(result))
    (out / "config.json").write_text(json.dumps(result.config, indent=2, sort_keys=True))
    dump_spec(gt if gt.zeta > 0 or not _is_exact(gt, spec) else spec, out / "mdp.json")
    summary = {"agent": summarize(result)}
    if baseline is not None:
        (out / f"baseline_{baseline.policy}.csv").write_text(run_csv(baseline))
        summary["baseline"] = summarize(baseline)
    if result.agent is not None:
        (out / "agent.json").write_text(result.agent.checkpoint_json())
        arrays = {
            "potentials": result.arrays["potentials"],
            "weights": result.arrays["weights"],
            "history_phi": result.agent.history_phi,
            "history_reward": result.agent.history_reward,
            "history_next": result.agent.history_next,
            "history_state": result.agent.history_state,
            "history_action": result.agent.history_action,
            "betas": np.array([r.beta for r in result.records]),
        }
        if result.config.get("checkpoints") == "every-k":
            arrays["q_tables"] = result.arrays["q_tables"]
        np.savez_compressed(out / "checkpoints.npz", **arrays)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _is_exact(gt: GroundTruthMdp, spec: LinearMdpSpec) -> bool:
    return np.allclose(gt.p_exact, spec.transition_table(), atol=1e-12) and \
        np.allclose(gt.r_exact, spec.reward_table(), atol=1e-12)


# --- sweeps -------------------------------------------------------------------

SWEEP_KEYS = ("d", "H", "K", "c", "zeta", "seed")


@dataclass
class SweepCell:
    index: int
    params: dict
    summary: Optional[dict] = None
    error: Optional[str] = None
    result: Optional[RunResult] = field(default=None, repr=False)


def _cell_config(base: ExperimentConfig, params: dict) -> ExperimentConfig:
    doc = base.to_dict()
    mdp = dict(doc["mdp"])
    for key, val in params.items():
        if key in ("d", "H"):
            mdp[key] = val
        elif key in SWEEP_KEYS:
            doc[key] = val
        else:
            raise ConfigError(f"cannot sweep over {key!r}")
    doc["mdp"] = mdp
    return ExperimentConfig.from_dict(doc)


def _run_cell(args):
    index, base_doc, params, keep = args
    try:
        cfg = _cell_config(ExperimentConfig.from_dict(base_doc), params)
        result = run_experiment(cfg)
        summary = summarize(result)
        summary["diagnostics"] = _cell_flags(result)
        if not keep:
            result.agent = None
            result.arrays = {}
        return SweepCell(index, params, summary, None, result if keep else None)
    except Exception as exc:  # recorded per cell; the sweep continues
        return SweepCell(index, params, None, f"{type(exc).__name__}: {exc}")


def _cell_flags(result: RunResult) -> dict:
    from . import diagnostics

    return diagnostics.deterministic_flags(result)


def sweep(base: ExperimentConfig, grid: dict, workers: int = 1, keep_results: bool = False) -> list:
    """Run every combination of ``grid`` (ordered as ``itertools.product`` of its values)."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("sweep grid must be nonempty")
    keys = list(grid)
    combos = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    jobs = [(i, base.to_dict(), params, keep_results) for i, params in enumerate(combos)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(job) for job in jobs]
    cells.sort(key=lambda c: c.index)
    return cells


def sweep_csv(cells: list) -> str:
    """Deterministic aggregate table (no wall-clock columns)."""
    keys = sorted({k for c in cells for k in c.params})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", *keys, "terminal_regret", "mean_final_regret", "slope", "error"])
    for c in cells:
        s = c.summary or {}
        w.writerow([c.index, *(c.params.get(k, "") for k in keys),
                    repr(s["terminal_regret"]) if s else "",
                    repr(s["mean_final_regret"]) if s else "",
                    repr(s["slope"]) if s and s.get("slope") is not None else "",
                    c.error or ""])
    return buf.getvalue()


def sweep_summary(cells: list) -> dict:
    out = []
    for c in cells:
        entry = {"index": c.index, "params": c.params, "error": c.error}
        if c.summary:
            entry.update({k: c.summary[k] for k in ("terminal_regret", "mean_final_regret", "slope")})
            entry["diagnostics"] = c.summary.get("diagnostics", {})
        out.append(entry)
    return {"cells": out}


def env_seed(default: int) -> int:
    val = os.environ.get("LSVI_LAB_SEED")
    return int(val) if val not in (None, "") else default
