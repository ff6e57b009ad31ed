"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured numbers
and then asserts.  Run with ``pytest tests/test_acceptance.py -v``.
"""
from __future__ import annotations

import itertools as itr
import math
import time

import numpy as np
import pytest

from localgeom.geometry import equivalence_order, lookup, overlap_probe
from localgeom.graphs import MixedGraph, implied_independences, is_ancestral, is_maximal, markov_equivalent
from localgeom.harness import PowerConfig, run_discpath_power
from localgeom.loglinear import JointTable, design_matrix, from_loglinear, marginal_loglinear, to_loglinear
from localgeom.phenomena import run_suite
from localgeom.selection import (
    CountTable,
    chain_table,
    collider_bn,
    collider_table,
    kkt_residuals,
    learn_bn,
    loglin_lasso,
    theorem71_experiment,
)

_POWER: dict = {}


def report(capsys, idx, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {idx}: {detail}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def power_cell(k, s, rate=2.0, reps=2500):
    """Accuracy and runtime of one cell, cached across criteria."""
    cfg = PowerConfig(ks=(k,), ss=(float(s),), replicates=reps, rate=rate)
    n = cfg.sample_size(k, s)
    key = (k, float(s), rate, reps)
    if key not in _POWER:
        t0 = time.perf_counter()
        (res,) = run_discpath_power(cfg)
        _POWER[key] = (res, time.perf_counter() - t0)
    return _POWER[key]


def stderr(acc, reps):
    return math.sqrt(max(acc * (1 - acc), 1e-12) / reps)


# 1 ----------------------------------------------------------------------------------

def test_criterion_01_table1_cells(capsys):
    cells = [  # k, s, n, target accuracy, runtime limit in seconds
        (2, 0, 32, 0.703, 60),
        (2, 1, 512, 0.679, None),
        (3, 0, 250, 0.776, None),
        (3, 1, 16000, 0.711, 600),
    ]
    ok = True
    parts = []
    for k, s, n, target, limit in cells:
        res, secs = power_cell(k, s)
        good = res.n == n and abs(res.accuracy - target) <= 0.03 and not res.flagged
        if limit is not None:
            good &= secs < limit
        ok &= good
        lo, hi = res.ci95()
        parts.append(f"k={k},s={s},n={res.n}: {res.accuracy:.4f} (target {target}, "
                     f"CI [{lo:.3f},{hi:.3f}], {secs:.1f}s)")
    report(capsys, 1, ok, "; ".join(parts))


# 2 ----------------------------------------------------------------------------------

def test_criterion_02_power_flatness(capsys):
    accs, ns = [], []
    for s in range(4):
        res, _ = power_cell(2, s)
        assert res.n <= 10 ** 7
        accs.append(res.accuracy)
        ns.append(res.n)
    mean = float(np.mean(accs))
    ok = all(abs(a - mean) <= 0.05 for a in accs)
    report(capsys, 2, ok, f"k=2 n={ns} accuracies={[round(a, 4) for a in accs]} "
                          f"mean={mean:.4f} range={max(accs) - min(accs):.4f} "
                          f"(cells with n > 1e7 skipped: none in this grid)")


# 3 ----------------------------------------------------------------------------------

def test_criterion_03_rate_control(capsys):
    accs, ns = [], []
    for s in range(4):
        res, _ = power_cell(2, s, rate=1.0)
        accs.append(res.accuracy)
        ns.append(res.n)
    se = [stderr(a, 2500) for a in accs]
    monotone = all(b <= a + 2 * math.hypot(sa, sb) for a, b, sa, sb in zip(accs, accs[1:], se, se[1:]))
    toward_half = abs(accs[-1] - 0.5) < abs(accs[0] - 0.5) - 4 * se[0]
    report(capsys, 3, monotone and toward_half,
           f"k=2 n=n_init*2^(ks) {ns}: accuracies={[round(a, 4) for a in accs]} "
           f"(monotone within 2 SE: {monotone}; moves toward 0.5: {toward_half})")


# 4 ----------------------------------------------------------------------------------

KINDS = [None, "->", "<-", "<->", "--"]


def all_mags(n):
    pairs = list(itr.combinations(range(n), 2))
    out = []
    for choice in itr.product(KINDS, repeat=len(pairs)):
        edges = [(a, k, b) for (a, b), k in zip(pairs, choice) if k is not None]
        G = MixedGraph.from_edges(n, edges)
        if is_ancestral(G) and is_maximal(G):
            out.append(G)
    return out


def test_criterion_04_markov_equivalence_oracle(capsys):
    mags3 = all_mags(3)
    pairs = list(itr.combinations_with_replacement(mags3, 2))
    mags4 = all_mags(4)
    rng = np.random.default_rng(2024)
    # half uniform pairs, half pairs sharing a skeleton so that equivalent pairs are common
    by_skel = {}
    for G in mags4:
        by_skel.setdefault(frozenset(G.edges), []).append(G)
    for _ in range(250):
        i, j = rng.integers(len(mags4), size=2)
        pairs.append((mags4[i], mags4[j]))
    groups = [g for g in by_skel.values() if len(g) > 1]
    for _ in range(250):
        g = groups[rng.integers(len(groups))]
        i, j = rng.choice(len(g), size=2, replace=False)
        pairs.append((g[i], g[j]))
    agree = 0
    n_equiv = 0
    for A, B in pairs:
        truth = implied_independences(A).statements == implied_independences(B).statements
        n_equiv += truth
        agree += markov_equivalent(A, B) == truth
    n3 = len(pairs) - 500
    report(capsys, 4, agree == len(pairs),
           f"{agree}/{len(pairs)} agree ({len(mags3)} MAGs on 3 vertices, {n3} pairs; "
           f"500 random pairs from {len(mags4)} MAGs on 4 vertices; {n_equiv} equivalent pairs overall)")


# 5 ----------------------------------------------------------------------------------

def test_criterion_05_loglinear_identities(capsys):
    invol = all(np.array_equal(design_matrix(n) @ design_matrix(n),
                               2 ** n * np.eye(2 ** n, dtype=np.int64)) for n in range(11))
    rng = np.random.default_rng(5)
    rt = 0.0
    for n in range(1, 8):
        for _ in range(5):
            p = JointTable.normalized(rng.gamma(0.5, size=2 ** n) + 1e-4)
            rt = max(rt, float(np.abs(from_loglinear(to_loglinear(p)).probs - p.probs).max()))
    V = 4
    eps = 0.1 * 2.0 ** -np.arange(7)         # six octaves
    subsets = [K for r in range(1, V) for K in itr.combinations(range(V), r)]
    # the asserted slope is that of the sup over all (K, A) per direction; single
    # coordinates can have a near-zero eps^2 coefficient for a random direction
    min_slope = np.inf
    coord_slope = np.inf
    for _ in range(20):
        d = rng.normal(size=2 ** V)
        d -= d.mean()
        d /= np.abs(d).max()
        tabs = [JointTable.normalized(1.0 + e * d) for e in eps]
        full = [to_loglinear(p) for p in tabs]
        env = np.zeros(len(eps))
        for K in subsets:
            marg = [marginal_loglinear(p, K) for p in tabs]
            for r in range(1, len(K) + 1):
                for A in itr.combinations(K, r):
                    diff = np.array([abs(m[A] - f[A]) for m, f in zip(marg, full)])
                    env = np.maximum(env, diff)
                    coord_slope = min(coord_slope, np.polyfit(np.log(eps), np.log(diff), 1)[0])
        min_slope = min(min_slope, np.polyfit(np.log(eps), np.log(env), 1)[0])
    ok = invol and rt < 1e-12 and min_slope >= 1.9
    report(capsys, 5, ok, f"involution n<=10: {invol}; roundtrip max error {rt:.2e}; "
                          f"min marginal-agreement slope {min_slope:.3f} over 20 directions "
                          f"(sup over A in K < V, |V|=4; worst single coordinate {coord_slope:.3f})")


# 6 ----------------------------------------------------------------------------------

def test_criterion_06_order_estimation(capsys):
    targets = {"transversal_lines": (1.0, 0.1), "example_1_1": (2.0, 0.15),
               "gauss_marg_vs_cond": (2.0, 0.2), "discpath_k3": (3.0, 0.3)}
    t0 = time.perf_counter()
    ok = True
    parts = []
    for name, (c, tol) in targets.items():
        P = lookup(name)
        est = equivalence_order(P.M1, P.M2, P.theta, seed=0)
        ok &= abs(est.slope - c) <= tol
        parts.append(f"{name} {est.slope:.3f} (target {c}±{tol})")
    secs = time.perf_counter() - t0
    ok &= secs < 120
    report(capsys, 6, ok, "; ".join(parts) + f"; total {secs:.1f}s")


# 7 ----------------------------------------------------------------------------------

def test_criterion_07_overlap_probe(capsys):
    f3 = lookup("figure_3c")
    r3 = overlap_probe(f3.M1, f3.M2, f3.theta, seed=0)
    tl = lookup("transversal_lines")
    rt = overlap_probe(tl.M1, tl.M2, tl.theta, seed=0)
    gm = lookup("gauss_marg_vs_cond")
    rg = overlap_probe(gm.M1, gm.M2, gm.theta, seed=0)
    e1 = np.array([1.0, 0, 0])
    f3_ok = r3.has_overlap_evidence and all(abs(w @ e1) > np.cos(np.radians(5)) for w in r3.witnesses)
    # witnesses span the rho_xz / rho_yz coordinate plane (zero rho_xy component)
    W = rg.witnesses
    g_ok = len(W) > 0 and np.abs(W[:, 0]).max() < np.sin(np.radians(5)) \
        and np.abs(W[:, 1]).min() > 0 and np.abs(W[:, 2]).min() > 0
    ok = f3_ok and not rt.has_overlap_evidence and g_ok
    report(capsys, 7, ok, f"figure_3c: {len(r3.witnesses)} witnesses near ±e1 ({f3_ok}); "
                          f"transversal_lines: {len(rt.witnesses)} witnesses; "
                          f"gauss_marg_vs_cond: {len(W)} witnesses, max |rho_xy| component "
                          f"{np.abs(W[:, 0]).max() if len(W) else float('nan'):.2e}")


# 8 ----------------------------------------------------------------------------------

def test_criterion_08_bn_learner(capsys):
    want = {
        "collider": (collider_table(), {frozenset({0, 2}), frozenset({1, 2})}, {(0, 2, 1)}),
        "chain": (chain_table(), {frozenset({0, 2}), frozenset({1, 2})}, set()),
    }
    rates = {}
    for name, (p, skel, coll) in want.items():
        hits = 0
        for r in range(200):
            rng = np.random.default_rng(np.random.SeedSequence(8, spawn_key=(len(name), r)))
            out = learn_bn(CountTable.sample(p, 10 ** 5, rng), delta=0.75)
            hits += out.skeleton == skel and out.colliders == coll
        rates[name] = hits / 200
    curve = theorem71_experiment(collider_bn(), gamma=0.3, replicates=200, seed=0)
    rec = curve.recovery
    nondec = all(b >= a for a, b in zip(rec, rec[1:]))
    ok = all(v >= 0.9 for v in rates.values()) and nondec and rec[-1] >= 0.95
    report(capsys, 8, ok, f"recovery at n=1e5 over 200 replicates: {rates}; "
                          f"shrinking-signal curve (gamma=0.3, delta={curve.delta}) n={curve.n_grid} "
                          f"recovery={rec}")


# 9 ----------------------------------------------------------------------------------

def test_criterion_09_lasso_convexity(capsys):
    rng = np.random.default_rng(9)
    worst_obj = 0.0
    worst_kkt = -np.inf
    worst_active = 0.0
    same_pattern = True
    for _ in range(10):
        d = int(rng.integers(3, 6))
        p = JointTable.normalized(rng.gamma(1.0, size=2 ** d) + 0.02)
        data = CountTable.sample(p, int(rng.integers(500, 20000)), rng)
        nu = data.n ** 0.75
        runs = [loglin_lasso(data, nu, init=rng.normal(0, 1, 2 ** d)) for _ in range(5)]
        objs = [r.objective for r in runs]
        worst_obj = max(worst_obj, max(objs) - min(objs))
        same_pattern &= all(r.pattern == runs[0].pattern for r in runs)
        for r in runs:
            ze, ae = kkt_residuals(data, nu, r.params.values)
            worst_kkt = max(worst_kkt, ze)
            worst_active = max(worst_active, ae)
    ok = worst_obj <= 1e-7 and same_pattern and worst_kkt <= 1e-6 and worst_active <= 1e-6
    report(capsys, 9, ok, f"max objective spread {worst_obj:.2e}; patterns identical: {same_pattern}; "
                          f"zero-coordinate excess {worst_kkt:.2e}, active error {worst_active:.2e}")


# 10 ---------------------------------------------------------------------------------

def test_criterion_10_phenomena(capsys):
    rep = run_suite(0)
    checks = {
        "verma": rep["verma"]["max_error_vs_p_y_given_ab"] <= 1e-12,
        "bias_slope": rep["adjustment_bias"]["slope"] >= 1.9,
        "arma_first_order": max(rep["arma_p1"]["discrepancy"], rep["arma_p3"]["discrepancy"]) < 1e-6,
        "arma_second_order": rep["arma_p1"]["second_order_differs"] and rep["arma_p3"]["second_order_differs"],
        "quadratic_adjustment": rep["quadratic_adjustment"]["passed"],
        "quadratic_product": rep["quadratic_product"]["passed"],
        "quadratic_triple": rep["quadratic_triple"]["passed"],
    }
    report(capsys, 10, all(checks.values()),
           f"verma error {rep['verma']['max_error_vs_p_y_given_ab']:.1e}; "
           f"bias slope {rep['adjustment_bias']['slope']:.3f}; "
           f"arma discrepancy {rep['arma_p3']['discrepancy']:.1e}; "
           f"envelope slopes {rep['quadratic_adjustment']['envelope_slope']:.3f}/"
           f"{rep['quadratic_product']['envelope_slope']:.3f}/{rep['quadratic_triple']['envelope_slope']:.3f}; "
           f"checks {checks}")
