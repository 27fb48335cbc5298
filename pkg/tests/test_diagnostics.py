import math

import numpy as np
import pytest

from lsvi_lab import dp_oracle
from lsvi_lab.diagnostics import (
    DiagnosticsReport,
    MissingCheckpoints,
    NotExactlyLinear,
    binomial_margin,
    bonus_sum_bound,
    check_optimism,
    covering_bound,
    diagnose_arrays,
    elliptical_potential,
    empirical_bellman_decomposition,
    log_det_telescoping,
    misspecification_noise_check,
    self_normalized_mc,
    sequential_potentials,
    weight_norm_check,
)
from lsvi_lab.harness import ExperimentConfig, build_mdp, run_experiment
from lsvi_lab.mdp_core import embed_tabular, make_simplex_mdp, perturb_to_misspecified, rng_stream, sample_transition

from .conftest import random_tabular

# 2 log 9 + 4 log(1 + 32 sqrt 2), 20 significant digits
COVERING_EXAMPLE = 19.731113063983783358


def _cfg(**kw):
    base = dict(mdp={"kind": "tabular", "S": 3, "A": 2, "H": 3, "seed": 1}, K=150)
    base.update(kw)
    return ExperimentConfig(**base)


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True) * rng.uniform(0, 1, size=(n, 1))


def test_huge_bonus_is_always_optimistic():
    cfg = _cfg(c=100.0)
    result = run_experiment(cfg)
    gt, _ = build_mdp(cfg)
    opt = check_optimism(result.arrays["q_tables"], dp_oracle.optimal_values(gt))
    assert opt.rate == 0.0 and opt.first_violation is None


def test_zero_bonus_breaks_optimism():
    cfg = _cfg(beta=0.0)
    result = run_experiment(cfg)
    gt, _ = build_mdp(cfg)
    opt = check_optimism(result.arrays["q_tables"], dp_oracle.optimal_values(gt))
    assert opt.rate > 0.0
    assert opt.first_violation is not None


def test_optimism_allowance_scales_with_zeta():
    oracle = dp_oracle.OracleValues(np.ones((3, 1, 1)), np.zeros((4, 1)))
    # allowances 4*3*(3, 2, 1)*0.01 = 0.36, 0.24, 0.12
    q = np.array([[[[0.7]], [[0.7]], [[0.7]]]])
    res = check_optimism(q, oracle, zeta=0.01)
    # deficit 0.3 is covered only at the first step
    assert res.violations == 2 and res.first_violation == (0, 1, 0, 0)
    with pytest.raises(MissingCheckpoints):
        check_optimism(None, oracle)


def test_elliptical_potential_examples():
    assert elliptical_potential(np.zeros((0, 3)), 1.0) == (0.0, 3)
    obs, d = elliptical_potential(np.array([[0.6, 0.8]]), 1e-8)
    assert obs == pytest.approx(1.0 / (1.0 + 1e-8), abs=1e-12)
    assert d == 2


def test_elliptical_potential_bound_over_seeds():
    for seed in range(100):
        phis = _unit_rows(np.random.default_rng(seed), 500, 8)
        obs, d = elliptical_potential(phis, 1.0)
        assert obs <= d + 1e-9


def test_bonus_sum_examples():
    assert bonus_sum_bound(np.zeros((0, 4)), 1.0) == (0.0, 0.0)
    obs, bound = bonus_sum_bound(np.array([[1.0, 0.0, 0.0]]), 1.0)
    assert obs == pytest.approx(1.0, abs=1e-15)
    assert bound == pytest.approx(6 * math.log(2), abs=1e-15)


def test_log_det_telescoping_sandwich():
    phis = _unit_rows(np.random.default_rng(3), 300, 5)
    low, pot, high = log_det_telescoping(phis, 1.0)
    assert low - 1e-9 <= pot <= high + 1e-9
    np.testing.assert_allclose(sequential_potentials(phis, 1.0).sum(), pot)


def test_weight_norm_check_flags_violations():
    w = np.zeros((3, 2, 4))
    assert weight_norm_check(w, 2, 1.0)["violations"] == 0
    w[1, 0, 0] = 2 * 2 * math.sqrt(4 * 2) + 1e-6
    assert weight_norm_check(w, 2, 1.0)["violations"] == 1


def test_self_normalized_zero_noise():
    rng = np.random.default_rng(0)
    assert self_normalized_mc(4, 50, 0.0, 1.0, 0.05, 1000, rng) == 0.0


@pytest.mark.parametrize("delta", [0.5, 0.05])
def test_self_normalized_gaussian(delta):
    rng = np.random.default_rng(int(delta * 100))
    trials = 2000
    freq = self_normalized_mc(4, 50, 1.0, 1.0, delta, trials, rng)
    assert freq <= delta + binomial_margin(delta, trials)


def test_self_normalized_uniform_noise():
    rng = np.random.default_rng(5)
    freq = self_normalized_mc(4, 50, 1.0, 1.0, 0.05, 2000, rng, noise="uniform")
    assert freq <= 0.05 + binomial_margin(0.05, 2000)
    with pytest.raises(ValueError):
        self_normalized_mc(4, 5, 1.0, 1.0, 0.05, 10, rng, noise="cauchy")


def test_covering_bound_example():
    assert covering_bound(2, 1.0, 1.0, 1.0, 0.5) == pytest.approx(COVERING_EXAMPLE, rel=1e-14)


def test_covering_bound_large_eps_limit():
    d, L, B, lam = 3, 1.0, 1e-3, 1.0
    val = covering_bound(d, L, B, lam, 4 * L)
    assert val == pytest.approx(d * math.log(2), abs=1e-5)


def test_covering_bound_monotone_and_pure():
    grid = np.geomspace(1e-3, 10, 50)
    vals = [covering_bound(4, 2.0, 3.0, 1.0, e) for e in grid]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert covering_bound(4, 2.0, 3.0, 1.0, 0.1) == covering_bound(4, 2.0, 3.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        covering_bound(2, 1.0, 1.0, 1.0, 0.0)


def _history(spec, h, n, seed):
    rng = np.random.default_rng(seed)
    S, A = spec.num_states, spec.num_actions
    xs = rng.integers(0, S, n)
    acts = rng.integers(0, A, n)
    stream = rng_stream(seed, 9)
    nxt = np.array([sample_transition(spec, h, x, a, stream) for x, a in zip(xs, acts)])
    return xs, acts, nxt


def test_decomposition_zero_function(small_simplex):
    xs, acts, nxt = _history(small_simplex, 0, 50, 0)
    dec = empirical_bellman_decomposition(small_simplex, 0, xs, acts, nxt, np.zeros(5), 1.0)
    assert dec.sample_gap == 0.0 and dec.linear_gap == 0.0 and dec.linear_gap_bound_ok


def test_decomposition_tabular_regularization_gap_vanishes():
    P, r = random_tabular(3, 2, 2, 6)
    spec = embed_tabular(P, r, 2)
    xs, acts, nxt = _history(spec, 0, 3000, 1)
    V = dp_oracle.optimal_values(spec).v_star[1]
    dec = empirical_bellman_decomposition(spec, 0, xs, acts, nxt, V, 1e-6)
    assert dec.linear_gap <= 1e-3
    assert dec.linear_gap_bound_ok


def test_decomposition_sample_gap_shrinks(small_simplex):
    V = dp_oracle.optimal_values(small_simplex).v_star[1]
    xs, acts, nxt = _history(small_simplex, 0, 1000, 2)
    gaps = []
    for k in (10, 100, 1000):
        dec = empirical_bellman_decomposition(small_simplex, 0, xs[:k], acts[:k], nxt[:k], V, 1.0)
        assert dec.linear_gap_bound_ok
        gaps.append(dec.sample_gap)
    assert gaps[0] >= gaps[1] >= gaps[2]


def test_decomposition_requires_exact_linearity(small_simplex):
    gt = perturb_to_misspecified(small_simplex, 0.2, rng_stream(0, 1))
    with pytest.raises(NotExactlyLinear):
        empirical_bellman_decomposition(gt, 0, [0], [0], [1], np.ones(5), 1.0)


def test_misspecification_noise_bound_holds(small_simplex):
    gt = perturb_to_misspecified(small_simplex, 0.2, rng_stream(3, 1))
    V = dp_oracle.optimal_values(gt).v_star[1]
    xs, acts, _ = _history(small_simplex, 0, 400, 4)
    res = misspecification_noise_check(gt, 0, xs, acts, V, 1.0)
    assert res["violations"] == 0 and 0 < res["B"]


def test_diagnose_arrays_on_a_run():
    cfg = _cfg(c=0.05, checkpoints="every-k")
    result = run_experiment(cfg)
    gt, spec = build_mdp(cfg)
    agent = result.agent
    arrays = dict(result.arrays, history_phi=agent.history_phi, history_state=agent.history_state,
                  history_action=agent.history_action, history_next=agent.history_next,
                  betas=np.array([r.beta for r in result.records]))
    report = diagnose_arrays(spec, arrays, cfg.to_dict(), self_normalized_trials=1000)
    names = {c.name for c in report.checks}
    assert {"optimism_rate", "weight_norm", "covering_bound", "self_normalized"} <= names
    assert report.ok, report.table()
    doc = report.to_dict()
    assert doc["ok"] and all("slack" in c for c in doc["checks"])


def test_report_table_marks_failures():
    report = DiagnosticsReport()
    report.add("a", True, 0.1, 1.0)
    report.add("b", False, 2.0, 1.0, "too big")
    assert not report.ok
    assert "FAIL" in report.table() and "too big" in report.table()
