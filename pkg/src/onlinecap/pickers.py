"""Calibration pick rules: which holdout points calibrate a selected test point.

All pickers return positions into the current holdout views (``holdout.v``,
``holdout.r``); ``holdout.times[positions]`` gives the global indices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import HoldoutBuffer, SelectionTrace
from .selectors import SelectionRule, passes

NONADAPTIVE = "nonadaptive"
INTERSECTION = "intersection"
SWAP = "swap"
EXPRESS = "express"
KCAP = "kcap"
KEXPRESS = "kexpress"
PICK_KINDS = (NONADAPTIVE, INTERSECTION, SWAP, EXPRESS, KCAP, KEXPRESS)


@dataclass(frozen=True)
class PickRule:
    kind: str = NONADAPTIVE
    k: Optional[int] = None

    def __post_init__(self):
        if self.kind not in PICK_KINDS:
            raise ValueError(f"unknown pick rule {self.kind!r}")
        if self.kind in (KCAP, KEXPRESS) and (self.k is None or self.k < 1):
            raise ValueError(f"{self.kind} needs a positive window k")

    def __str__(self) -> str:
        return f"{self.k}-{self.kind}" if self.kind in (KCAP, KEXPRESS) else self.kind


class IncompatibleRules(ValueError):
    def __init__(self, pick: PickRule, rule: SelectionRule):
        need = "symmetric-threshold" if pick.kind == SWAP else "decision-driven"
        super().__init__(f"picker {pick} requires a {need} selector, got selector {rule.name}")
        self.fields = ("picker", "selector")


def check_compatible(pick: PickRule, rule: SelectionRule) -> None:
    if pick.kind == SWAP and not rule.symmetric:
        raise IncompatibleRules(pick, rule)
    if pick.kind in (INTERSECTION, EXPRESS, KCAP, KEXPRESS) and not rule.decision_driven:
        raise IncompatibleRules(pick, rule)


def pick_nonadaptive(rule: SelectionRule, trace: SelectionTrace, holdout: HoldoutBuffer) -> np.ndarray:
    """``{s in H_t : Pi_t(X_s) = 1}``."""
    return np.flatnonzero(rule.indicator(holdout.v, trace, holdout))


def _agreement(rule: SelectionRule, trace: SelectionTrace, values: np.ndarray, v_t: float,
               times: np.ndarray) -> np.ndarray:
    """``prod_{i in times} 1{Pi_i(values) = Pi_i(v_t)}`` for every entry of ``values``."""
    if len(times) == 0:
        return np.ones(len(values), dtype=bool)
    if getattr(rule, "constant_hypothesis", True):
        # Pi_i(x) = 1{h(x) vs b_i} with one transform h for all i: the two points
        # disagree on Pi_i exactly when b_i falls in [min(h), max(h)).
        thr = np.sort(rule.history_thresholds(times, trace))
        h = rule.transform(values)
        h_t = float(rule.transform(np.asarray([v_t]))[0])
        lo = np.minimum(h, h_t)
        hi = np.maximum(h, h_t)
        between = np.searchsorted(thr, hi, side="left") - np.searchsorted(thr, lo, side="left")
        return between == 0
    mat = rule.history_indicators(values, times, trace)
    ref = rule.history_indicators(np.asarray([v_t]), times, trace)
    return np.all(mat == ref, axis=1)


def _online_selected_by_current(rule, trace, holdout) -> np.ndarray:
    """``N_t^on = {0 <= i < t : Pi_t(X_i) = 1}``."""
    return np.flatnonzero(rule.indicator(trace.scores, trace, holdout))


def pick_adaptive_intersection(rule: SelectionRule, trace: SelectionTrace,
                               holdout: HoldoutBuffer, v_t: float,
                               window: Optional[int] = None) -> np.ndarray:
    """Nonadaptive pick intersected with agreement on every ``Pi_i``, ``i in N_t^on``.

    Offline points go through the same product test.  ``window`` restricts the
    product to ``i >= t - window`` (K-CAP).
    """
    if not rule.decision_driven:
        raise TypeError(f"intersection pick needs a decision-driven selector, got {rule.name}")
    base = rule.indicator(holdout.v, trace, holdout)
    times = _online_selected_by_current(rule, trace, holdout)
    if window is not None:
        times = times[times >= len(trace) - window]
    cand = np.flatnonzero(base)
    keep = _agreement(rule, trace, holdout.v[cand], v_t, times)
    return cand[keep]


def pick_express(rule: SelectionRule, trace: SelectionTrace, holdout: HoldoutBuffer,
                 v_t: float, window: Optional[int] = None) -> np.ndarray:
    """EXPRESS: agreement on every past rule ``Pi_0..Pi_{t-1}`` (or the last ``window``)."""
    if not rule.decision_driven:
        raise TypeError(f"EXPRESS pick needs a decision-driven selector, got {rule.name}")
    t = len(trace)
    start = 0 if window is None else max(0, t - window)
    times = np.arange(start, t)
    base = rule.indicator(holdout.v, trace, holdout)
    cand = np.flatnonzero(base)
    keep = _agreement(rule, trace, holdout.v[cand], v_t, times)
    return cand[keep]


def pick_windowed(kind: str, k: int, rule, trace, holdout, v_t) -> np.ndarray:
    if kind == KCAP:
        return pick_adaptive_intersection(rule, trace, holdout, v_t, window=k)
    if kind == KEXPRESS:
        return pick_express(rule, trace, holdout, v_t, window=k)
    raise ValueError(f"not a windowed pick rule: {kind!r}")


def pick_adaptive_swap(rule, holdout: HoldoutBuffer, v_t: float) -> np.ndarray:
    """Keep ``s`` when ``V_s`` passes the threshold recomputed with ``V_s`` swapped for ``v_t``.

    Only the slots feeding the statistic are swapped; older holdout entries are
    judged against the unswapped threshold.
    """
    if not rule.symmetric:
        raise TypeError(f"swap pick needs a symmetric-threshold selector, got {rule.name}")
    v = holdout.v
    w = rule.window_scores(holdout)
    out = np.empty(len(v), dtype=bool)
    n_old = len(v) - len(w)
    if n_old:
        out[:n_old] = passes(v[:n_old], rule.stat(w), rule.direction)
    out[n_old:] = rule.stat.swap_passes(w, float(v_t), rule.direction)
    return np.flatnonzero(out)


def pick(pick_rule: PickRule, rule: SelectionRule, trace: SelectionTrace,
         holdout: HoldoutBuffer, v_t: float) -> np.ndarray:
    kind = pick_rule.kind
    if kind == NONADAPTIVE:
        return pick_nonadaptive(rule, trace, holdout)
    if kind == INTERSECTION:
        return pick_adaptive_intersection(rule, trace, holdout, v_t)
    if kind == EXPRESS:
        return pick_express(rule, trace, holdout, v_t)
    if kind == SWAP:
        return pick_adaptive_swap(rule, holdout, v_t)
    return pick_windowed(kind, pick_rule.k, rule, trace, holdout, v_t)
