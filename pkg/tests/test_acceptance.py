"""Desk-scale Monte-Carlo acceptance runs.

Each test prints one PASS/FAIL line (also echoed at the end of the session)
and then asserts the same condition, so a failing criterion stays red.
"""
import functools
import math
from collections import defaultdict

import numpy as np
import pytest

from onlinecap.conformal import conformal_quantile
from onlinecap.experiment import RunConfig, run
from onlinecap.metrics import report_csv
from onlinecap.pickers import pick_adaptive_intersection, pick_express, pick_nonadaptive
from onlinecap.selectors import Direction, MeanStat, QuantileStat, SymmetricThreshold

from streams import random_decision_stream, swap_world
from verdicts import record

pytestmark = pytest.mark.slow

RAW = {"scc-fixed-rule", "express-comparison", "quantile-swap", "spending-baselines"}
RUNS = ("fcr-fixed-holdout", "quantile-swap", "scc-fixed-rule", "express-comparison",
        "dtaci-change-point", "spending-baselines")


@functools.lru_cache(maxsize=None)
def preset(name):
    return run(RunConfig.from_dict({"preset": name}), keep_raw=name in RAW)


def logs_by_label(result):
    out = defaultdict(list)
    for rep, log in sorted(result.raw, key=lambda p: p[0]):
        out[log.label].append(log)
    return out


def final(result, label):
    rep = result.report(label)
    return rep.at(int(rep.grid[-1]))


def verdict(name, checks):
    """``checks``: list of (description, ok). One line, red if any check fails."""
    ok = all(c for _, c in checks)
    record(name, ok, "; ".join(f"{d} [{'ok' if c else 'FAIL'}]" for d, c in checks))
    assert ok, [d for d, c in checks if not c]


def test_criterion_1_fixed_holdout_fcr():
    fcr = final(preset("fcr-fixed-holdout"), "CAP")["fcr"]
    verdict("1 fixed-holdout FCR", [(f"CAP FCR(T)={fcr:.4f} in [0.07, 0.105]", 0.07 <= fcr <= 0.105)])


def test_criterion_2_quantile_swap():
    res = preset("quantile-swap")
    cap, ocp, lord = (final(res, m) for m in ("CAP", "OCP", "LORD-CI"))
    ratio = lord["mean_len"] / cap["mean_len"]
    verdict("2 quantile selector with swap picking", [
        (f"CAP FCR={cap['fcr']:.4f} in [0.08, 0.11]", 0.08 <= cap["fcr"] <= 0.11),
        (f"OCP FCR={ocp['fcr']:.4f} >= 0.13", ocp["fcr"] >= 0.13),
        (f"LORD-CI FCR={lord['fcr']:.4f} <= 0.10", lord["fcr"] <= 0.10),
        (f"LORD-CI/CAP mean length={ratio:.3f} >= 1.5", ratio >= 1.5),
    ])


def test_criterion_3_selection_conditional_coverage():
    logs = logs_by_label(preset("scc-fixed-rule"))["CAP"]
    sel = np.concatenate([lg.selected for lg in logs]) == 1
    covered = np.concatenate([lg.covered for lg in logs])[sel]
    calib = np.concatenate([lg.calib_size for lg in logs])[sel]
    alpha = 0.1
    cov, n = float(covered.mean()), int(sel.sum())
    hi = 1 - alpha + 1 / (calib.mean() + 1) + 0.01
    verdict("3 selection-conditional coverage", [
        (f"{n} selected events >= 20000", n >= 20_000),
        (f"coverage={cov:.4f} in [{1 - alpha - 0.01:.2f}, {hi:.4f}]", 1 - alpha - 0.01 <= cov <= hi),
    ])


def _swap_symmetry_failures(stat, rng, draws=1000):
    joint = rest = 0
    for direction in (Direction.ABOVE, Direction.BELOW):
        rule = SymmetricThreshold(stat, direction)
        done = 0
        while done < draws:
            m = int(rng.integers(1, 30))
            v = rng.integers(-3, 4, size=m).astype(float) if rng.random() < 0.5 else rng.normal(size=m)
            s = int(rng.integers(m))
            v_t = float(rng.choice(v)) if rng.random() < 0.2 else float(rng.normal())
            sel, picked = swap_world(rule, v, s, v_t)
            w = v.copy()
            w[s] = v_t
            sel_sw, picked_sw = swap_world(rule, w, s, v[s])
            joint += (sel and s in picked) != (sel_sw and s in picked_sw)
            if sel and s in picked:
                rest += picked - {s} != picked_sw - {s}
            done += 1
    return joint, rest


def test_criterion_4_pick_rule_suite():
    rng = np.random.default_rng(404)
    checks = []
    for stat in (MeanStat(), QuantileStat(0.7)):
        joint, rest = _swap_symmetry_failures(stat, rng)
        checks.append((f"{stat.name} swap: {joint} joint-selection and {rest} rest-of-pick asymmetries", joint + rest == 0))
    bad_nest = 0
    for _ in range(1000):
        T = int(rng.integers(0, 80))
        rule, tr, hold, online, _ = random_decision_stream(rng, T)
        v_t = float(online[T])
        non = set(pick_nonadaptive(rule, tr, hold).tolist())
        ada = set(pick_adaptive_intersection(rule, tr, hold, v_t).tolist())
        exp = set(pick_express(rule, tr, hold, v_t).tolist())
        bad_nest += not (exp <= ada <= non)
    checks.append((f"{bad_nest} nesting violations in 1000 streams", bad_nest == 0))
    bad_eq = done = 0
    while done < 1000:
        T = int(rng.integers(0, 80))
        rule, tr, hold, online, _ = random_decision_stream(rng, T, sign=+1)
        v_t = float(online[T])
        if not rule.select(v_t, tr, hold):
            continue
        bad_eq += not np.array_equal(pick_adaptive_intersection(rule, tr, hold, v_t),
                                     pick_nonadaptive(rule, tr, hold))
        done += 1
    checks.append((f"{bad_eq} intersection/nonadaptive mismatches in 1000 selected draws", bad_eq == 0))
    verdict("4 pick-rule symmetry and nesting", checks)


def test_criterion_5_express_comparison():
    res = preset("express-comparison")
    row = res.report("CAP-ada").at(99)
    logs = logs_by_label(res)
    worse = sum(int(np.any(e.calib_size[e.selected == 1] > a.calib_size[e.selected == 1]))
                for a, e in zip(logs["CAP-ada"], logs["EXPRESS"]))
    verdict("5 comparison with EXPRESS", [
        (f"CAP-ada FCR(100)={row['fcr']:.4f} in [0.33, 0.40]", 0.33 <= row["fcr"] <= 0.40),
        (f"CAP-ada mean calib={row['mean_calib']:.2f} in [26, 32]", 26 <= row["mean_calib"] <= 32),
        (f"CAP-ada infinite frequency={row['inf_freq']:.4f} in [0.07, 0.14]", 0.07 <= row["inf_freq"] <= 0.14),
        (f"{worse} runs where EXPRESS picks more than CAP-ada", worse == 0),
    ])


def test_criterion_6_dtaci_under_shift():
    res = preset("dtaci-change-point")
    ada, cap = final(res, "CAP-DtACI")["fcr"], final(res, "CAP")["fcr"]
    verdict("6 CAP-DtACI under a change point", [
        (f"CAP-DtACI FCR={ada:.4f} in [0.08, 0.12]", 0.08 <= ada <= 0.12),
        (f"CAP FCR={cap:.4f} outside [0.08, 0.12]", not 0.08 <= cap <= 0.12),
    ])


def split_conformal_coverage(seed, trials=100_000, m=19, alpha=0.1):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((trials, m + 1))
    scores = np.abs(y)
    hits = sum(scores[i, m] <= conformal_quantile(scores[i, :m], alpha) for i in range(trials))
    return hits / trials


def test_criterion_7_split_conformal_coverage():
    trials, alpha, m = 100_000, 0.1, 19
    cov = split_conformal_coverage(707)
    se = math.sqrt(cov * (1 - cov) / trials)
    lo, hi = 1 - alpha - 3 * se, 1 - alpha + 1 / (m + 1) + 3 * se
    verdict("7 split-conformal marginal coverage", [(f"coverage={cov:.4f} in [{lo:.4f}, {hi:.4f}]", lo <= cov <= hi)])


def test_criterion_8_spending_invariants():
    checks = []
    for name in ("quantile-swap", "spending-baselines"):
        logs = logs_by_label(preset(name))["LORD-CI"]
        over = 0
        for lg in logs:
            sel = lg.selected == 1
            spent = np.cumsum(np.where(sel, lg.level, 0.0))
            over += int(np.any(spent > 0.1 * np.maximum(1, np.cumsum(sel)) + 1e-12))
        # a budget breach raises inside the run, so reaching here means none fired
        checks.append((f"{name}: {len(logs)} LORD-CI streams, {over} with selected levels over budget", over == 0))
    res = preset("spending-baselines")
    el, lord = final(res, "eLOND-CI"), final(res, "LORD-CI")
    checks.append((f"eLOND-CI FCR={el['fcr']:.4f} <= 0.11", el["fcr"] <= 0.11))
    checks.append((f"eLOND-CI mean length={el['mean_len']:.3f} >= LORD-CI {lord['mean_len']:.3f}",
                   el["mean_len"] >= lord["mean_len"]))
    verdict("8 spending invariants", checks)


def test_criterion_9_determinism():
    checks = []
    for name in RUNS:
        again = run(RunConfig.from_dict({"preset": name}))
        checks.append((f"{name} report bytes", report_csv(again.reports) == report_csv(preset(name).reports)))
    checks.append(("split-conformal coverage", split_conformal_coverage(707) == split_conformal_coverage(707)))
    verdict("9 determinism", checks)
