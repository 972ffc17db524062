"""Per-step orchestrators and the stream loop.

Methods
-------
``CAP``        picked calibration set at the fixed level alpha.
``CAP-DtACI``  picked calibration set at a level tuned by dynamically-tuned
               adaptive conformal inference, updated only at selections.
``OCP``        whole holdout at level alpha, selection ignored.
``LORD-CI``    whole holdout at a spent level alpha_t.
``eLOND-CI``   whole holdout at the e-LOND level alpha_t.
``DtACI-sel``  whole holdout with the selective DtACI level.

Coverage is judged in score space (``R_t <= q``), which is exactly membership
in ``{y : R(x, y) <= q}`` for any score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .conformal import (ABS_RESIDUAL, ScoreFunction, build_interval, conformal_quantile,
                        quantile_at_level, realized_beta)
from .core import HoldoutBuffer, HoldoutMode, PredictionInterval, SelectionTrace, StreamRecord
from .pickers import NONADAPTIVE, PickRule, check_compatible, pick
from .selectors import SelectionRule, saffron_gamma

CAP = "CAP"
CAP_DTACI = "CAP-DtACI"
OCP = "OCP"
LORD_CI = "LORD-CI"
ELOND_CI = "eLOND-CI"
DTACI_SEL = "DtACI-sel"
METHODS = (CAP, CAP_DTACI, OCP, LORD_CI, ELOND_CI, DTACI_SEL)
PICKING_METHODS = (CAP, CAP_DTACI)

PAPER_GAMMAS = (0.008, 0.016, 0.032, 0.064, 0.128, 0.256)
DECAY_EXPONENT = 0.501
INVARIANT_SLACK = 1e-12


# --------------------------------------------------------------------------
# CAP


def cap_step(t: int, record: StreamRecord, rule: SelectionRule, pick_rule: PickRule,
             holdout: HoldoutBuffer, alpha: float, trace: SelectionTrace,
             score: Optional[ScoreFunction] = None) -> Optional[PredictionInterval]:
    """One step of CAP; ``None`` when the record is not selected.

    The caller appends the decision to ``trace`` and advances ``holdout``.
    """
    if len(trace) != t:
        raise ValueError(f"trace holds {len(trace)} decisions, expected {t}")
    if not rule.select(record.v, trace, holdout):
        return None
    pos = pick(pick_rule, rule, trace, holdout, record.v)
    q = conformal_quantile(holdout.r[pos], alpha)
    return build_interval(record.mu_hat, q, alpha, holdout.times[pos], score)


def ocp_step(t: int, record: StreamRecord, rule: SelectionRule, holdout: HoldoutBuffer,
             alpha: float, trace: SelectionTrace,
             score: Optional[ScoreFunction] = None) -> Optional[PredictionInterval]:
    """Marginal split-conformal interval on the entire holdout, when selected."""
    if not rule.select(record.v, trace, holdout):
        return None
    q = conformal_quantile(holdout.r, alpha)
    return build_interval(record.mu_hat, q, alpha, holdout.times, score)


# --------------------------------------------------------------------------
# DtACI


@dataclass(frozen=True)
class DtACIParams:
    gammas: tuple = PAPER_GAMMAS
    starts: Optional[tuple] = None      # defaults to the target alpha for every expert
    interval_len: int = 200             # I
    decaying: bool = True
    phi0: Optional[float] = None
    eta0: Optional[float] = None

    def resolved(self, alpha: float) -> "DtACIParams":
        k = len(self.gammas)
        I = self.interval_len
        phi0 = 1.0 / (2 * I) if self.phi0 is None else self.phi0
        if self.eta0 is None:
            eta0 = math.sqrt((3 * math.log(k * I) + 6)
                             / (I * (1 - alpha) ** 2 * alpha ** 3 + I * alpha ** 2 * (1 - alpha) ** 2))
        else:
            eta0 = self.eta0
        starts = tuple([alpha] * k) if self.starts is None else tuple(self.starts)
        if len(starts) != k:
            raise ValueError("DtACI needs one starting level per step size")
        return DtACIParams(tuple(self.gammas), starts, I, self.decaying, phi0, eta0)


def pinball_loss(theta, beta, alpha: float):
    """``alpha (beta - theta) - min(0, beta - theta)``."""
    d = np.asarray(beta) - np.asarray(theta)
    return alpha * d - np.minimum(0.0, d)


@dataclass
class DtACIState:
    alpha: float
    params: DtACIParams
    levels: Optional[np.ndarray] = None     # alpha^i at the last selection tau
    weights: Optional[np.ndarray] = None
    level: Optional[float] = None           # sampled alpha_tau
    n_selected: int = 0
    tau: Optional[int] = None
    calib_tau: Optional[np.ndarray] = field(default=None, repr=False)
    r_tau: Optional[float] = None

    def __post_init__(self):
        self.params = self.params.resolved(self.alpha)

    @property
    def initialized(self) -> bool:
        return self.levels is not None

    @property
    def probabilities(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    def _schedule(self, value: float) -> float:
        if not self.params.decaying:
            return value
        return value * self.n_selected ** -DECAY_EXPONENT

    def _sample(self, rng: np.random.Generator) -> float:
        cdf = np.cumsum(self.probabilities)
        i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return float(self.levels[min(i, len(self.levels) - 1)])

    def next_level(self, rng: np.random.Generator) -> float:
        """Advance to a new selection and return the level ``alpha_t`` to emit at."""
        if not self.initialized:
            k = len(self.params.gammas)
            self.levels = np.asarray(self.params.starts, dtype=float)
            self.weights = np.ones(k)
        else:
            self._update()
        self.n_selected += 1
        self.level = self._sample(rng)
        return self.level

    def _update(self) -> None:
        if self.r_tau is None:
            raise RuntimeError(f"label of the last selection (t={self.tau}) never arrived")
        a = self.alpha
        gam = np.asarray(self.params.gammas)
        beta = realized_beta(self.r_tau, self.calib_tau)
        err = np.array([self.r_tau > quantile_at_level(self.calib_tau, lv) for lv in self.levels],
                       dtype=float)
        # n_selected still counts selections up to and including tau here
        eta = self._schedule(self.params.eta0)
        phi = self._schedule(self.params.phi0)
        w_bar = self.weights * np.exp(-eta * pinball_loss(self.levels, beta, a))
        w = (1 - phi) * w_bar + phi * w_bar.sum() / len(w_bar)
        self.weights = w / w.sum()
        self.levels = self.levels + gam * (a - err)

    def remember(self, t: int, calib_scores: np.ndarray) -> None:
        self.tau = t
        self.calib_tau = np.array(calib_scores, dtype=float)
        self.r_tau = None

    def observe(self, t: int, r: float) -> None:
        if t == self.tau:
            self.r_tau = float(r)


def cap_dtaci_step(t: int, record: StreamRecord, rule: SelectionRule, pick_rule: PickRule,
                   holdout: HoldoutBuffer, state: DtACIState, trace: SelectionTrace,
                   rng: np.random.Generator, score: Optional[ScoreFunction] = None):
    """One step of CAP-DtACI.  ``state.observe`` must be fed revealed residuals."""
    if not rule.select(record.v, trace, holdout):
        return None, state
    pos = pick(pick_rule, rule, trace, holdout, record.v)
    calib = holdout.r[pos]
    level = state.next_level(rng)
    state.remember(t, calib)
    q = quantile_at_level(calib, level)
    return build_interval(record.mu_hat, q, level, holdout.times[pos], score), state


# --------------------------------------------------------------------------
# spending baselines


def lord_gamma(kind: str = "power", horizon: int = 10**6) -> np.ndarray:
    """Discount sequence for LORD-CI, index 0 unused.

    ``power`` is ``j^-1.6`` normalized; ``lord`` is the default LORD sequence
    ``0.0722 log(j v 2) / (j exp(sqrt(log j)))``.
    """
    if kind == "power":
        return saffron_gamma(1.6, horizon)
    if kind == "lord":
        j = np.arange(1, horizon + 1, dtype=float)
        g = 0.0722 * np.log(np.maximum(j, 2)) / (j * np.exp(np.sqrt(np.log(j))))
        out = np.zeros(horizon + 1)
        out[1:] = g
        return out
    raise ValueError(f"unknown LORD discount {kind!r}")


class BudgetViolation(AssertionError):
    pass


@dataclass
class SpendingState:
    """Miscoverage budget bookkeeping for LORD-CI."""

    alpha: float
    gamma: np.ndarray = field(default_factory=lord_gamma, repr=False)
    spent: float = 0.0
    n_selected: int = 0
    last_selection: int = -1
    levels: list = field(default_factory=list)

    def budget(self) -> float:
        return self.alpha * max(1, self.n_selected)

    def level(self, t: int) -> float:
        """Spend and return ``alpha_t``; measurable w.r.t. ``S_0..S_{t-1}``."""
        lag = t - self.last_selection
        cand = self.alpha * (float(self.gamma[lag]) if lag < len(self.gamma) else 0.0)
        a_t = max(0.0, min(cand, self.budget() - self.spent))
        self.spent += a_t
        self.levels.append(a_t)
        if self.spent > self.budget() + INVARIANT_SLACK:
            raise BudgetViolation(f"LORD-CI spent {self.spent} > {self.budget()} at t={t}")
        return a_t

    def record(self, t: int, selected: bool) -> None:
        if selected:
            self.n_selected += 1
            self.last_selection = t


def lord_ci_step(t: int, record: StreamRecord, rule: SelectionRule, holdout: HoldoutBuffer,
                 alpha: float, state: SpendingState, trace: SelectionTrace,
                 score: Optional[ScoreFunction] = None):
    a_t = state.level(t)
    selected = rule.select(record.v, trace, holdout)
    state.record(t, selected)
    if not selected:
        return None, state
    q = quantile_at_level(holdout.r, a_t)
    return build_interval(record.mu_hat, q, a_t, holdout.times, score), state


def elond_level(alpha: float, t: int, n_selected_before: int) -> float:
    """``alpha * gamma_{t+1} * (sum_{j<t} S_j + 1)`` with ``gamma_j = 1/(j(j+1))``."""
    j = t + 1
    return alpha * (n_selected_before + 1) / (j * (j + 1))


def elond_pvalue(calib_scores: np.ndarray, r: float) -> float:
    return (np.count_nonzero(calib_scores >= r) + 1.0) / (len(calib_scores) + 1.0)


def elond_ci_step(t: int, record: StreamRecord, rule: SelectionRule, holdout: HoldoutBuffer,
                  alpha: float, trace: SelectionTrace, score: Optional[ScoreFunction] = None):
    """e-LOND-CI interval ``{y : e_t(y) < 1/alpha_t}``.

    With ``e_t = 1{p_t <= alpha_t} / alpha_t`` that set is ``{y : p_t(y) > alpha_t}``,
    i.e. the marginal conformal interval at level ``alpha_t``.
    """
    if not rule.select(record.v, trace, holdout):
        return None
    a_t = elond_level(alpha, t, trace.cum_selected)
    q = quantile_at_level(holdout.r, a_t)
    return build_interval(record.mu_hat, q, a_t, holdout.times, score)


# --------------------------------------------------------------------------
# stream loop


@dataclass
class MethodSpec:
    method: str = CAP
    pick: PickRule = field(default_factory=PickRule)
    dtaci: DtACIParams = field(default_factory=DtACIParams)
    lord_discount: str = "power"
    label: Optional[str] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method not in PICKING_METHODS and self.pick.kind != NONADAPTIVE:
            raise ValueError(f"{self.method} calibrates on the whole holdout; picker must be nonadaptive")
        if self.label is None:
            if self.method in PICKING_METHODS and self.pick.kind != NONADAPTIVE:
                self.label = f"{self.method}[{self.pick}]"
            else:
                self.label = self.method


@dataclass
class StreamData:
    """Offline block ``-n..-1`` plus the online stream, as flat arrays."""

    holdout_mu: np.ndarray
    holdout_v: np.ndarray
    holdout_y: np.ndarray
    mu: np.ndarray
    v: np.ndarray
    y: np.ndarray
    score: ScoreFunction = field(default_factory=ScoreFunction)
    holdout_t: Optional[np.ndarray] = None
    t: Optional[np.ndarray] = None

    def __post_init__(self):
        n, T = len(self.holdout_y), len(self.y)
        if self.holdout_t is None:
            self.holdout_t = np.arange(-n, 0)
        if self.t is None:
            self.t = np.arange(T)
        self.holdout_r = self.score(self.holdout_mu, self.holdout_y)
        self.r = self.score(self.mu, self.y)

    @property
    def horizon(self) -> int:
        return len(self.y)


@dataclass
class RunLog:
    """One row per online step for one method."""

    label: str
    selected: np.ndarray
    level: np.ndarray
    calib_size: np.ndarray
    half_width: np.ndarray
    covered: np.ndarray         # 1, 0, or -1 for "not selected"

    @classmethod
    def empty(cls, label: str, T: int) -> "RunLog":
        return cls(label, np.zeros(T, dtype=np.int8), np.full(T, np.nan), np.full(T, -1, dtype=np.int64),
                   np.full(T, np.nan), np.full(T, -1, dtype=np.int8))


class _Engine:
    def __init__(self, spec: MethodSpec, alpha: float, T: int, rng: np.random.Generator,
                 score: ScoreFunction):
        self.spec = spec
        self.alpha = alpha
        self.rng = rng
        self.score = score
        self.log = RunLog.empty(spec.label, T)
        self.q = math.nan
        self.lord = (SpendingState(alpha, lord_gamma(spec.lord_discount))
                     if spec.method == LORD_CI else None)
        self.dtaci = (DtACIState(alpha, spec.dtaci)
                      if spec.method in (CAP_DTACI, DTACI_SEL) else None)

    def step(self, t, selected, v_t, mu_t, rule, trace, holdout, picks):
        m = self.spec.method
        level = self.alpha
        if m == LORD_CI:
            level = self.lord.level(t)
            self.lord.record(t, selected)
        if not selected:
            return
        if m in PICKING_METHODS:
            key = self.spec.pick
            if key not in picks:
                picks[key] = pick(key, rule, trace, holdout, v_t)
            calib = holdout.r[picks[key]]
        else:
            calib = holdout.r
        if m == ELOND_CI:
            level = elond_level(self.alpha, t, trace.cum_selected)
        elif self.dtaci is not None:
            level = self.dtaci.next_level(self.rng)
            self.dtaci.remember(t, calib)
        q = quantile_at_level(calib, level)
        log = self.log
        log.selected[t] = 1
        log.level[t] = level
        log.calib_size[t] = len(calib)
        if self.score.kind == ABS_RESIDUAL or math.isinf(q):
            log.half_width[t] = q
        else:
            log.half_width[t] = build_interval(mu_t, q, level, (), self.score).half_width
        self.q = q

    def reveal(self, t, r_t):
        if self.log.selected[t]:
            self.log.covered[t] = 1 if r_t <= self.q else 0
        if self.dtaci is not None:
            self.dtaci.observe(t, r_t)


def run_stream(data: StreamData, rule: SelectionRule, methods: Sequence[MethodSpec], *,
               alpha: float, holdout_mode: HoldoutMode,
               rngs: Optional[Sequence[np.random.Generator]] = None) -> tuple[list[RunLog], SelectionTrace]:
    """Run every method over the same stream; selections are shared.

    Selection rules here never look at labels or at the intervals, so one
    decision sequence serves all methods.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    for spec in methods:
        check_compatible(spec.pick, rule)
    T = data.horizon
    if rngs is None:
        rngs = [np.random.default_rng(0) for _ in methods]
    rule = rule.fresh()
    holdout = HoldoutBuffer.from_arrays(holdout_mode, data.holdout_t, data.holdout_v,
                                        data.holdout_mu, data.holdout_y, data.holdout_r,
                                        capacity=T)
    trace = SelectionTrace(T)
    engines = [_Engine(spec, alpha, T, rng, data.score) for spec, rng in zip(methods, rngs)]
    ts, vs, mus, ys, rs = data.t, data.v, data.mu, data.y, data.r
    for t in range(T):
        v_t = float(vs[t])
        selected = rule.select(v_t, trace, holdout)
        picks: dict = {}
        for eng in engines:
            eng.step(t, selected, v_t, float(mus[t]), rule, trace, holdout, picks)
        r_t = float(rs[t])
        for eng in engines:
            eng.reveal(t, r_t)
        rule.commit(v_t, selected, trace)
        trace.append(selected, v_t)
        holdout.advance_values(int(ts[t]), v_t, float(mus[t]), float(ys[t]), r_t)
    return [eng.log for eng in engines], trace
