"""Per-step methods, adaptive levels, spending schedules and the stream loop."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onlinecap.conformal import ScoreFunction, quantile_at_level
from onlinecap.core import HoldoutBuffer, HoldoutMode, SelectionTrace, StreamRecord
from onlinecap.engine import (CAP, CAP_DTACI, DTACI_SEL, ELOND_CI, LORD_CI, OCP, BudgetViolation,
                              DtACIParams, DtACIState, MethodSpec, SpendingState, StreamData,
                              cap_dtaci_step, cap_step, elond_ci_step, elond_level, elond_pvalue,
                              lord_ci_step, lord_gamma, ocp_step, pinball_loss, run_stream)
from onlinecap.pickers import PickRule
from onlinecap.selectors import (DecisionDriven, FixedThreshold, LinearCapped, QuantileStat,
                                 SymmetricThreshold)

from oracles import aci_path, elond_interval_grid, quantile_sorted


def holdout(r, v=None, mode=None):
    r = np.asarray(r, dtype=float)
    n = len(r)
    v = np.zeros(n) if v is None else np.asarray(v, dtype=float)
    return HoldoutBuffer.from_arrays(mode or HoldoutMode.full(), np.arange(-n, 0), v, np.zeros(n), r, r)


def level_quantile(calib, level):
    """Oracle for the level convention: <= 0 infinite, >= 1 zero, else sorted order statistic."""
    if level <= 0:
        return math.inf
    if level >= 1:
        return 0.0
    return quantile_sorted(calib, level)


# ===========================================================================
# CAP and OCP
# ===========================================================================


class TestCapStep:
    def test_all_nine_points_give_the_maximum(self):
        rng = np.random.default_rng(0)
        r = rng.exponential(size=9)
        hold = holdout(r, v=np.ones(9), mode=HoldoutMode.fixed())
        iv = cap_step(0, StreamRecord(0, 1.0, 1.0), FixedThreshold(0.0), PickRule(), hold, 0.1,
                      SelectionTrace())
        assert iv.half_width == np.sort(r)[8]
        assert iv.calib_size == 9

    def test_not_selected(self):
        hold = holdout([1.0, 2.0], v=[1.0, 1.0])
        assert cap_step(0, StreamRecord(0, 0.0, -1.0), FixedThreshold(0.0), PickRule(), hold, 0.1,
                        SelectionTrace()) is None

    def test_empty_pick_is_infinite(self):
        hold = holdout([1.0, 2.0], v=[-1.0, -1.0])
        iv = cap_step(0, StreamRecord(0, 0.0, 5.0), FixedThreshold(0.0), PickRule(), hold, 0.1,
                      SelectionTrace())
        assert iv.infinite and iv.calib_size == 0

    def test_trace_must_match_time(self):
        with pytest.raises(ValueError):
            cap_step(3, StreamRecord(3, 0.0, 1.0), FixedThreshold(0.0), PickRule(), holdout([1.0]), 0.1,
                     SelectionTrace())

    def test_ocp_uses_whole_holdout(self):
        r = np.arange(1.0, 20.0)
        hold = holdout(r, v=np.r_[np.ones(5), -np.ones(14)])
        iv = ocp_step(0, StreamRecord(0, 0.0, 1.0), FixedThreshold(0.0), hold, 0.1, SelectionTrace())
        assert iv.half_width == 18.0 and iv.calib_size == 19


# ===========================================================================
# DtACI
# ===========================================================================


def run_dtaci(params, alpha, r_stream, calib_stream, seed=0):
    """Drive a DtACI state through a sequence of selections; returns per-selection snapshots."""
    state = DtACIState(alpha, params)
    rng = np.random.default_rng(seed)
    snaps = []
    for t, (r, calib) in enumerate(zip(r_stream, calib_stream)):
        level = state.next_level(rng)
        snaps.append((state.levels.copy(), state.weights.copy(), level))
        state.remember(t, calib)
        state.observe(t, r)
    return state, snaps


class TestDtACI:
    def test_all_covered_raises_every_level(self):
        gam = (0.01, 0.05, 0.2)
        state = DtACIState(0.1, DtACIParams(gam, decaying=False))
        rng = np.random.default_rng(0)
        state.next_level(rng)
        before = state.levels.copy()
        state.remember(0, np.arange(1.0, 51.0))
        state.observe(0, 0.5)
        state.next_level(rng)
        assert np.allclose(state.levels, before + np.asarray(gam) * 0.1, rtol=0, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), gamma=st.sampled_from([0.005, 0.05, 0.3]),
           alpha=st.sampled_from([0.05, 0.1, 0.3]))
    def test_single_expert_is_plain_aci(self, seed, gamma, alpha):
        rng = np.random.default_rng(seed)
        n = 60
        rs = rng.exponential(size=n)
        calibs = [rng.exponential(size=int(rng.integers(0, 30))) for _ in range(n)]
        _, snaps = run_dtaci(DtACIParams((gamma,)), alpha, rs, calibs)
        levels = [float(s[0][0]) for s in snaps]
        errs = []
        for i in range(n - 1):
            errs.append(float(rs[i] > level_quantile(list(calibs[i]), levels[i])))
        want = aci_path(errs, alpha, gamma, alpha)
        assert np.allclose(levels, want, rtol=0, atol=1e-12)
        assert [s[2] for s in snaps] == levels

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), decaying=st.booleans())
    def test_expert_levels_stay_bounded(self, seed, decaying):
        rng = np.random.default_rng(seed)
        n = 150
        rs = rng.exponential(scale=rng.uniform(0.2, 5), size=n)
        calibs = [rng.exponential(size=int(rng.integers(0, 40))) for _ in range(n)]
        params = DtACIParams(decaying=decaying)
        _, snaps = run_dtaci(params, 0.1, rs, calibs, seed)
        gam = np.asarray(params.gammas)
        for levels, weights, _ in snaps:
            assert np.all(levels >= -gam - 1e-12) and np.all(levels <= 1 + gam + 1e-12)
            assert np.all(weights > 0)
            p = weights / weights.sum()
            assert abs(p.sum() - 1.0) <= 1e-12

    def test_weight_update_by_hand(self):
        alpha, gam, I = 0.1, (0.01, 0.1), 50
        params = DtACIParams(gam, starts=(0.05, 0.2), interval_len=I, decaying=True)
        state = DtACIState(alpha, params)
        rng = np.random.default_rng(3)
        state.next_level(rng)
        calib = np.array([0.5, 1.0, 1.5, 2.0])
        state.remember(0, calib)
        state.observe(0, 1.2)
        w0 = state.weights.copy()
        lv0 = state.levels.copy()
        state.next_level(rng)
        # realized level: 1 - #{c < 1.2} / 5 = 0.6
        beta = 0.6
        k = 2
        eta = math.sqrt((3 * math.log(k * I) + 6) / (I * 0.9 ** 2 * 0.1 ** 3 + I * 0.1 ** 2 * 0.9 ** 2))
        phi = 1 / (2 * I)
        # one selection so far, so the decay factor is 1
        loss = [alpha * (beta - a) - min(0.0, beta - a) for a in lv0]
        wb = [w * math.exp(-eta * l) for w, l in zip(w0, loss)]
        mix = [(1 - phi) * x + phi * sum(wb) / k for x in wb]
        want = [x / sum(mix) for x in mix]
        assert abs(want[0] - want[1]) > 1e-3
        assert np.allclose(state.weights, want, rtol=1e-12)

    def test_decay_uses_selection_count(self):
        state = DtACIState(0.1, DtACIParams(decaying=True))
        state.n_selected = 16
        assert state._schedule(1.0) == pytest.approx(16 ** -0.501)

    def test_missing_label_is_an_error(self):
        state = DtACIState(0.1, DtACIParams())
        rng = np.random.default_rng(0)
        state.next_level(rng)
        state.remember(0, np.ones(3))
        with pytest.raises(RuntimeError):
            state.next_level(rng)

    def test_pinball_loss(self):
        assert pinball_loss(0.1, 0.6, 0.1) == pytest.approx(0.05)
        assert pinball_loss(0.6, 0.1, 0.1) == pytest.approx(-0.05 + 0.5)

    def test_starts_length_checked(self):
        with pytest.raises(ValueError):
            DtACIParams((0.1, 0.2), starts=(0.1,)).resolved(0.1)

    def test_extreme_levels_follow_conventions(self):
        calib = np.array([1.0, 2.0])
        assert math.isinf(quantile_at_level(calib, -0.01))
        assert quantile_at_level(calib, 1.02) == 0.0

    def test_step_function(self):
        hold = holdout(np.arange(1.0, 30.0), v=np.ones(29))
        state = DtACIState(0.1, DtACIParams())
        iv, state = cap_dtaci_step(0, StreamRecord(0, 0.0, 1.0), FixedThreshold(0.0), PickRule(),
                                   hold, state, SelectionTrace(), np.random.default_rng(0))
        assert iv.level == 0.1 and iv.half_width == quantile_sorted(list(range(1, 30)), 0.1)
        assert state.tau == 0 and state.n_selected == 1


# ===========================================================================
# spending baselines
# ===========================================================================


class TestSpending:
    def test_elond_level_example(self):
        # third 1-based step after one selection: 0.1 * (1/12) * 2
        assert elond_level(0.1, 2, 1) == pytest.approx(1 / 60)

    def test_elond_small_level_is_infinite(self):
        hold = holdout(np.arange(1.0, 11.0), v=np.ones(10))
        tr = SelectionTrace()
        for _ in range(30):
            tr.append(False, 0.0)
        iv = elond_ci_step(30, StreamRecord(30, 0.0, 1.0), FixedThreshold(0.0), hold, 0.1, tr)
        assert iv.infinite

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), t=st.integers(0, 8), n_before=st.integers(0, 8))
    def test_elond_interval_is_evalue_inversion(self, seed, t, n_before):
        rng = np.random.default_rng(seed)
        calib = np.round(rng.exponential(size=int(rng.integers(20, 300))), 2)
        tr = SelectionTrace()
        for i in range(t):
            tr.append(i < n_before, 0.0)
        level = elond_level(0.1, t, tr.cum_selected)
        iv = elond_ci_step(t, StreamRecord(t, 0.0, 1.0), FixedThreshold(0.0),
                           holdout(calib, v=np.ones(len(calib))), 0.1, tr)
        grid = np.r_[np.linspace(-8, 8, 1601), calib, -calib]
        keep = set(elond_interval_grid(list(calib), 0.0, level, grid))
        assert keep == {y for y in grid if iv.covers(y)}

    def test_elond_pvalue_counts(self):
        assert elond_pvalue(np.array([1.0, 2.0, 3.0]), 2.0) == 0.75

    def test_lord_first_levels(self):
        g = lord_gamma("power")
        st_ = SpendingState(0.1, g)
        assert st_.level(0) == pytest.approx(0.1 * g[1])
        st_.record(0, False)
        assert st_.level(1) == pytest.approx(0.1 * g[2])

    def test_lord_restarts_after_selection(self):
        g = lord_gamma("power")
        st_ = SpendingState(0.1, g)
        st_.level(0)
        st_.record(0, True)
        assert st_.level(1) == pytest.approx(0.1 * g[1])

    def test_lord_discount_sequence(self):
        g = lord_gamma("lord", 100)
        j = 10
        assert g[j] == pytest.approx(0.0722 * math.log(j) / (j * math.exp(math.sqrt(math.log(j)))))
        assert g[1] == pytest.approx(0.0722 * math.log(2))
        with pytest.raises(ValueError):
            lord_gamma("other")

    @settings(max_examples=50, deadline=None)
    @given(bits=st.lists(st.booleans(), max_size=400), kind=st.sampled_from(["power", "lord"]))
    def test_lord_budget_never_exceeded(self, bits, kind):
        st_ = SpendingState(0.1, lord_gamma(kind))
        total, sel = 0.0, 0
        for t, b in enumerate(bits):
            a = st_.level(t)
            total += a
            assert a >= 0
            assert total <= 0.1 * max(1, sel) + 1e-12
            st_.record(t, b)
            sel += b

    def test_lord_violation_raises(self):
        st_ = SpendingState(0.1)
        st_.spent = 0.5     # corrupted ledger: more than the budget of 0.1
        with pytest.raises(BudgetViolation):
            st_.level(0)

    def test_lord_step(self):
        hold = holdout(np.arange(1.0, 2001.0), v=np.ones(2000))
        state = SpendingState(0.1)
        iv, state = lord_ci_step(0, StreamRecord(0, 0.0, 1.0), FixedThreshold(0.0), hold, 0.1, state,
                                 SelectionTrace())
        a0 = 0.1 * lord_gamma()[1]
        assert iv.level == pytest.approx(a0)
        assert iv.half_width == quantile_sorted(list(range(1, 2001)), a0)


# ===========================================================================
# stream loop
# ===========================================================================


def make_stream(seed, n=40, T=150):
    rng = np.random.default_rng(seed)
    hv = rng.normal(size=n)
    v = rng.normal(size=T)
    return StreamData(hv + 0.1 * rng.normal(size=n), hv, hv + rng.normal(size=n),
                      v + 0.1 * rng.normal(size=T), v, v + rng.normal(size=T))


class TestRunStream:
    def test_matches_step_functions(self):
        data = make_stream(1)
        rule = DecisionDriven(LinearCapped(0.5, 20.0, 1.0))
        specs = [MethodSpec(CAP, PickRule("intersection")), MethodSpec(CAP), MethodSpec(OCP),
                 MethodSpec(LORD_CI), MethodSpec(ELOND_CI), MethodSpec(CAP_DTACI, PickRule("express"))]
        logs, trace = run_stream(data, rule, specs, alpha=0.1, holdout_mode=HoldoutMode.full(),
                                 rngs=[np.random.default_rng(9) for _ in specs])

        rule = rule.fresh()
        hold = HoldoutBuffer.from_arrays(HoldoutMode.full(), data.holdout_t, data.holdout_v,
                                         data.holdout_mu, data.holdout_y, data.holdout_r)
        tr = SelectionTrace()
        lord = SpendingState(0.1)
        dt = DtACIState(0.1, DtACIParams())
        rng = np.random.default_rng(9)
        for t in range(data.horizon):
            rec = StreamRecord(t, float(data.mu[t]), float(data.v[t]))
            outs = [cap_step(t, rec, rule, PickRule("intersection"), hold, 0.1, tr),
                    cap_step(t, rec, rule, PickRule(), hold, 0.1, tr),
                    ocp_step(t, rec, rule, hold, 0.1, tr)]
            iv, lord = lord_ci_step(t, rec, rule, hold, 0.1, lord, tr)
            outs.append(iv)
            outs.append(elond_ci_step(t, rec, rule, hold, 0.1, tr))
            iv, dt = cap_dtaci_step(t, rec, rule, PickRule("express"), hold, dt, tr, rng)
            outs.append(iv)
            dt.observe(t, float(data.r[t]))
            s = outs[0] is not None
            for log, iv in zip(logs, outs):
                assert log.selected[t] == s
                if s:
                    assert log.half_width[t] == iv.half_width
                    assert log.calib_size[t] == iv.calib_size
                    assert log.level[t] == iv.level
                    assert log.covered[t] == int(iv.covers(float(data.y[t])))
                else:
                    assert log.covered[t] == -1
            rule.commit(rec.v, s, tr)
            tr.append(s, rec.v)
            hold.advance(StreamRecord(t, rec.mu_hat, rec.v, float(data.y[t]), float(data.r[t])))
        assert np.array_equal(trace.decisions, tr.decisions)

    def test_deterministic(self):
        data = make_stream(2)
        rule = SymmetricThreshold(QuantileStat(0.7), window=30)
        specs = [MethodSpec(CAP_DTACI, PickRule("swap")), MethodSpec(DTACI_SEL), MethodSpec(CAP)]
        a, _ = run_stream(data, rule, specs, alpha=0.1, holdout_mode=HoldoutMode.window(60),
                          rngs=[np.random.default_rng(i) for i in range(3)])
        b, _ = run_stream(data, rule, specs, alpha=0.1, holdout_mode=HoldoutMode.window(60),
                          rngs=[np.random.default_rng(i) for i in range(3)])
        for x, y in zip(a, b):
            for col in ("selected", "level", "calib_size", "half_width", "covered"):
                assert np.array_equal(getattr(x, col), getattr(y, col), equal_nan=True)

    def test_infinite_intervals_always_cover(self):
        data = make_stream(3, n=5)
        logs, _ = run_stream(data, FixedThreshold(1.5), [MethodSpec(CAP)], alpha=0.1,
                             holdout_mode=HoldoutMode.fixed())
        inf = np.isinf(logs[0].half_width)
        assert inf.any() and np.all(logs[0].covered[inf] == 1)

    def test_normalized_score_widths(self):
        rng = np.random.default_rng(4)
        n, T = 60, 80
        hmu, mu = rng.uniform(1, 2, n), rng.uniform(1, 2, T)
        data = StreamData(hmu, hmu, hmu * rng.uniform(0.5, 1.5, n), mu, mu, mu * rng.uniform(0.5, 1.5, T),
                          ScoreFunction("normalized_squared"))
        logs, _ = run_stream(data, FixedThreshold(1.5), [MethodSpec(OCP)], alpha=0.2,
                             holdout_mode=HoldoutMode.full())
        t = int(np.flatnonzero(logs[0].selected)[0])
        q = quantile_sorted(list(data.holdout_r) + list(data.r[:t]), 0.2)
        lo, hi = math.sqrt(max(0, mu[t] ** 2 * (1 - q))), math.sqrt(mu[t] ** 2 * (1 + q))
        assert logs[0].half_width[t] == pytest.approx((hi - lo) / 2, rel=1e-12)

    def test_incompatible_pair_rejected(self):
        with pytest.raises(ValueError):
            run_stream(make_stream(5), FixedThreshold(0.0), [MethodSpec(CAP, PickRule("swap"))],
                       alpha=0.1, holdout_mode=HoldoutMode.full())

    def test_alpha_checked(self):
        with pytest.raises(ValueError):
            run_stream(make_stream(5), FixedThreshold(0.0), [MethodSpec()], alpha=1.0,
                       holdout_mode=HoldoutMode.full())


class TestMethodSpec:
    def test_labels(self):
        assert MethodSpec(CAP, PickRule("swap")).label == "CAP[swap]"
        assert MethodSpec(CAP, PickRule("kcap", 20)).label == "CAP[20-kcap]"
        assert MethodSpec(OCP).label == "OCP"

    def test_whole_holdout_methods_reject_pickers(self):
        with pytest.raises(ValueError):
            MethodSpec(LORD_CI, PickRule("swap"))

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            MethodSpec("nope")
