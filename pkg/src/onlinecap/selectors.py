"""Online selection rules ``Pi_t``.

Every rule maps selection scores to decisions through a threshold on a
(possibly transformed) score.  Decision-driven rules can also reproduce the
thresholds of every past rule ``Pi_i`` from the trace, which is what the
intersection and EXPRESS pickers need.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Optional, Union

import numpy as np

from .conformal import conformal_pvalues
from .core import HoldoutBuffer, SelectionTrace

_CEIL_SLACK = 1e-9


class Direction(str, Enum):
    ABOVE = "above"   # select when score > threshold
    BELOW = "below"   # select when score <= threshold


def passes(values, threshold, direction: Direction):
    if direction is Direction.ABOVE:
        return np.greater(values, threshold)
    return np.less_equal(values, threshold)


# --------------------------------------------------------------------------
# threshold functions for decision-driven rules


@dataclass(frozen=True)
class LinearCapped:
    """``base + sign * min(s / scale, cap)`` evaluated at the selection count ``s``."""

    base: float
    scale: float = 50.0
    cap: float = math.inf
    sign: int = -1

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return self.base + self.sign * np.minimum(s / self.scale, self.cap)

    @property
    def nondecreasing(self) -> bool:
        return self.sign > 0


# --------------------------------------------------------------------------
# symmetric statistics


class MeanStat:
    """Sample mean, computed from a correctly rounded sum.

    Using ``math.fsum`` makes the value a function of the multiset alone, so
    swapping two scores cannot change it through rounding order.
    """

    name = "mean"

    def __call__(self, values: np.ndarray) -> float:
        if len(values) == 0:
            raise ValueError("mean threshold over an empty score window")
        return math.fsum(values) / len(values)

    def swap_passes(self, values: np.ndarray, v_t: float, direction: Direction) -> np.ndarray:
        """For each slot ``s``: does ``values[s]`` pass the mean with ``values[s]`` replaced by ``v_t``?"""
        m = len(values)
        if m == 0:
            raise ValueError("mean threshold over an empty score window")
        total = math.fsum(values)
        approx = (total - values + v_t) / m
        out = passes(values, approx, direction)
        tol = 1e-9 * (1.0 + float(np.max(np.abs(values))) + abs(v_t))
        for s in np.flatnonzero(np.abs(values - approx) <= tol):
            exact = math.fsum(np.concatenate((values, (-values[s], v_t)))) / m
            out[s] = passes(values[s], exact, direction)
        return out


class QuantileStat:
    """Left-continuous empirical quantile: the ``ceil(theta * m)``-th smallest score."""

    def __init__(self, theta: float):
        if not 0.0 < theta <= 1.0:
            raise ValueError(f"quantile level must lie in (0, 1], got {theta}")
        self.theta = float(theta)
        self.name = f"quantile({theta:g})"

    def rank(self, m: int) -> int:
        return max(1, math.ceil(self.theta * m - _CEIL_SLACK))

    def __call__(self, values: np.ndarray) -> float:
        m = len(values)
        if m == 0:
            raise ValueError("quantile threshold over an empty score window")
        k = self.rank(m)
        return float(np.partition(values, k - 1)[k - 1])

    def swapped(self, values: np.ndarray, v_t: float) -> np.ndarray:
        """Quantile of ``values`` with slot ``s`` replaced by ``v_t``, for every ``s``.

        Removing the element at sorted position ``j`` leaves ``b``; the k-th
        smallest of ``b + {v_t}`` is ``v_t`` clipped to ``[b_(k-1), b_(k)]``.
        """
        m = len(values)
        if m == 0:
            raise ValueError("quantile threshold over an empty score window")
        k = self.rank(m)
        order = np.argsort(values, kind="stable")
        a = values[order]
        j = np.empty(m, dtype=np.int64)
        j[order] = np.arange(m)
        # b[i] = a[i] if i < j else a[i + 1]
        if k >= 2:
            lo = np.where(k - 2 < j, a[k - 2], a[k - 1])
        else:
            lo = np.full(m, -math.inf)
        if k <= m - 1:
            hi = np.where(k - 1 < j, a[k - 1], a[min(k, m - 1)])
        else:
            hi = np.full(m, math.inf)
        return np.clip(v_t, lo, hi)

    def swap_passes(self, values: np.ndarray, v_t: float, direction: Direction) -> np.ndarray:
        return passes(values, self.swapped(values, v_t), direction)


# --------------------------------------------------------------------------
# SAFFRON


@lru_cache(maxsize=4)
def saffron_gamma(exponent: float = 1.6, horizon: int = 10**6) -> np.ndarray:
    """``gamma_j ∝ j^-exponent`` normalized over ``j = 1..horizon``; index 0 is 0."""
    j = np.arange(1, horizon + 1, dtype=float)
    g = j ** -exponent
    out = np.zeros(horizon + 1)
    out[1:] = g / g.sum()
    out.setflags(write=False)
    return out


@dataclass
class SaffronState:
    """Online FDR state for SAFFRON; times are 1-based test counts."""

    fdr: float = 0.2
    lam: float = 0.5
    w0: Optional[float] = None
    gamma: np.ndarray = field(default_factory=saffron_gamma, repr=False)
    rejections: list = field(default_factory=list)
    candidates: list = field(default_factory=lambda: [0])   # cumulative, index = test count
    thresholds: list = field(default_factory=list)

    def __post_init__(self):
        if self.w0 is None:
            self.w0 = self.fdr / 2.0
        if not 0.0 < self.lam < 1.0:
            raise ValueError("SAFFRON lambda must lie in (0, 1)")
        if self.w0 > self.fdr:
            raise ValueError("SAFFRON initial wealth must not exceed the FDR level")

    @property
    def steps(self) -> int:
        return len(self.thresholds)

    def _g(self, idx):
        idx = np.asarray(idx)
        return np.where(idx < len(self.gamma), self.gamma[np.minimum(idx, len(self.gamma) - 1)], 0.0)

    def threshold(self) -> float:
        """``beta_t`` for the next test, from past rejections and candidates only."""
        t = self.steps + 1
        cand_now = self.candidates[t - 1]
        total = self.w0 * float(self._g(t - cand_now))
        if self.rejections:
            tau = np.asarray(self.rejections)
            c_plus = cand_now - np.asarray([self.candidates[x] for x in self.rejections])
            g = self._g(t - tau - c_plus)
            total += (self.fdr - self.w0) * float(g[0]) + self.fdr * float(g[1:].sum())
        return min(self.lam, (1.0 - self.lam) * total)

    def update(self, p: float, beta: float) -> bool:
        reject = p <= beta
        t = self.steps + 1
        self.thresholds.append(beta)
        self.candidates.append(self.candidates[-1] + (1 if p <= self.lam else 0))
        if reject:
            self.rejections.append(t)
        return reject


def saffron_step(state: SaffronState, p: float) -> tuple[bool, float]:
    """Test one p-value; returns the rejection bit and the threshold used."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p-value must lie in (0, 1], got {p}")
    beta = state.threshold()
    return state.update(p, beta), beta


# --------------------------------------------------------------------------
# rules


class SelectionRule:
    """Base class; subclasses define ``threshold`` and optionally ``transform``."""

    decision_driven = False
    symmetric = False
    direction = Direction.ABOVE
    name = "rule"

    def fresh(self) -> "SelectionRule":
        """A copy with per-stream state reset."""
        return copy.deepcopy(self)

    def transform(self, values, t: Optional[int] = None):
        return values

    def threshold(self, trace: SelectionTrace, holdout: HoldoutBuffer) -> float:
        raise NotImplementedError

    def indicator(self, values, trace: SelectionTrace, holdout: HoldoutBuffer):
        """``Pi_t`` applied to an array of selection scores."""
        t = len(trace)
        return passes(self.transform(values, t), self.threshold(trace, holdout), self.direction)

    def select(self, v: float, trace: SelectionTrace, holdout: HoldoutBuffer) -> bool:
        return bool(self.indicator(np.asarray([v]), trace, holdout)[0])

    def commit(self, v: float, decision: bool, trace: SelectionTrace) -> None:
        """Record the outcome of step ``t``; call before ``trace.append``."""

    # decision-driven interface
    def history_thresholds(self, times: np.ndarray, trace: SelectionTrace) -> np.ndarray:
        raise TypeError(f"{self.name} is not decision-driven")

    def history_indicators(self, values: np.ndarray, times: np.ndarray,
                           trace: SelectionTrace) -> np.ndarray:
        """Matrix ``[Pi_i(values[a]) for i in times]`` with shape ``(len(values), len(times))``."""
        thr = self.history_thresholds(times, trace)
        tv = self.transform(values)
        return passes(tv[:, None], thr[None, :], self.direction)


class FixedThreshold(SelectionRule):
    decision_driven = True

    def __init__(self, c: float, direction: Direction = Direction.ABOVE):
        self.c = float(c)
        self.direction = Direction(direction)
        self.name = f"fixed({self.c:g})"

    def threshold(self, trace, holdout) -> float:
        return self.c

    def history_thresholds(self, times, trace):
        return np.full(len(times), self.c)


class DecisionDriven(SelectionRule):
    """Threshold that depends on history only through ``sum_{j<t} S_j``."""

    decision_driven = True

    def __init__(self, threshold_fn: Callable, direction: Direction = Direction.ABOVE):
        self.threshold_fn = threshold_fn
        self.direction = Direction(direction)
        self.name = "decision-driven"

    def threshold(self, trace, holdout) -> float:
        return float(self.threshold_fn(trace.cum_selected))

    def history_thresholds(self, times, trace):
        # rebuilt from the decision bits, never cached
        cum = trace.cum_before()
        return np.asarray(self.threshold_fn(cum[np.asarray(times, dtype=np.int64)]), dtype=float)


class SymmetricThreshold(SelectionRule):
    """``S_t = 1{V_t vs A_t(recent holdout scores)}`` with a permutation-invariant ``A_t``."""

    symmetric = True

    def __init__(self, stat, direction: Direction = Direction.ABOVE, window: Optional[int] = None):
        self.stat = stat
        self.direction = Direction(direction)
        self.window = window
        self.name = stat.name

    def window_scores(self, holdout: HoldoutBuffer) -> np.ndarray:
        return holdout.recent_v(self.window)

    def threshold(self, trace, holdout) -> float:
        return self.stat(self.window_scores(holdout))


class MultipleTesting(SelectionRule):
    """Select by rejecting ``H_0t: Y_t <= c_t`` with SAFFRON on conformal p-values.

    The p-values come from a dedicated labeled null set, never the holdout.
    ``c`` is either a constant or a callable of the online time index.
    """

    decision_driven = True
    direction = Direction.BELOW

    def __init__(self, null_mu_hat, null_y, c: Union[float, Callable], *, fdr: float = 0.2,
                 lam: float = 0.5, w0: Optional[float] = None, gamma_exponent: float = 1.6):
        self.null_mu_hat = np.asarray(null_mu_hat, dtype=float)
        self.null_y = np.asarray(null_y, dtype=float)
        self.c = c
        self.state = SaffronState(fdr=fdr, lam=lam, w0=w0, gamma=saffron_gamma(gamma_exponent))
        self.name = "saffron"
        self._sorted_cache: dict = {}
        if not callable(c):
            self._sorted_null(float(c))

    def fresh(self) -> "MultipleTesting":
        out = copy.copy(self)
        s = self.state
        out.state = SaffronState(fdr=s.fdr, lam=s.lam, w0=s.w0, gamma=s.gamma)
        return out

    def _c(self, t: Optional[int]) -> float:
        if callable(self.c):
            if t is None:
                raise ValueError("per-time hypothesis constants need the time index")
            return float(self.c(t))
        return float(self.c)

    def _sorted_null(self, c: float) -> np.ndarray:
        s = self._sorted_cache.get(c)
        if s is None:
            mask = self.null_y <= c
            s = np.sort(c - self.null_mu_hat[mask])
            self._sorted_cache[c] = s
        return s

    def transform(self, values, t: Optional[int] = None):
        c = self._c(t)
        return conformal_pvalues(self._sorted_null(c), c - np.asarray(values, dtype=float))

    def threshold(self, trace, holdout) -> float:
        return self.state.threshold()

    def select(self, v, trace, holdout) -> bool:
        p = float(self.transform(np.asarray([v]), len(trace))[0])
        return p <= self.state.threshold()

    def commit(self, v, decision, trace) -> None:
        p = float(self.transform(np.asarray([v]), len(trace))[0])
        beta = self.state.threshold()
        rejected = self.state.update(p, beta)
        assert rejected == decision

    def history_thresholds(self, times, trace):
        # SAFFRON thresholds also depend on candidate counts, so they are read
        # from the recorded state rather than rebuilt from decision bits
        return np.asarray(self.state.thresholds, dtype=float)[np.asarray(times, dtype=np.int64)]

    def history_indicators(self, values, times, trace):
        times = np.asarray(times, dtype=np.int64)
        thr = self.history_thresholds(times, trace)
        if not callable(self.c):
            return passes(self.transform(values)[:, None], thr[None, :], self.direction)
        out = np.empty((len(values), len(times)), dtype=bool)
        for col, (i, b) in enumerate(zip(times, thr)):
            out[:, col] = passes(self.transform(values, int(i)), b, self.direction)
        return out

    @property
    def constant_hypothesis(self) -> bool:
        return not callable(self.c)
