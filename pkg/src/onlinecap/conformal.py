"""Nonconformity scores, exact conformal quantiles and their inversions."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .core import PredictionInterval

ABS_RESIDUAL = "abs_residual"
NORMALIZED_SQUARED = "normalized_squared"
CUSTOM = "custom"

# (1 - alpha)(m + 1) lands on integers for common alphas; absorb the rounding
# error so that e.g. 0.7 * 10 does not become ceil(7.000000000000001) = 8.
_CEIL_SLACK = 1e-9


@dataclass(frozen=True)
class ScoreFunction:
    """Nonconformity score ``R(x, y)`` together with its level-set inversion.

    For ``custom`` scores, ``score_fn(mu_hat, y)`` must be vectorized and
    ``invert_fn(mu_hat, q)`` must return ``(lower, upper)`` or a list of such
    pairs; more than one disjoint piece is rejected.
    """

    kind: str = ABS_RESIDUAL
    score_fn: Optional[Callable] = None
    invert_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in (ABS_RESIDUAL, NORMALIZED_SQUARED, CUSTOM):
            raise ValueError(f"unknown score kind {self.kind!r}")
        if self.kind == CUSTOM and (self.score_fn is None or self.invert_fn is None):
            raise ValueError("custom scores need both score_fn and invert_fn")

    def __call__(self, mu_hat, y):
        mu_hat = np.asarray(mu_hat, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == ABS_RESIDUAL:
            return np.abs(y - mu_hat)
        if self.kind == NORMALIZED_SQUARED:
            if np.any(mu_hat <= 0):
                raise ValueError("normalized squared score needs mu_hat > 0")
            m2 = mu_hat * mu_hat
            return np.abs(y * y - m2) / m2
        return np.asarray(self.score_fn(mu_hat, y), dtype=float)

    def invert(self, mu_hat: float, q: float) -> tuple[float, float]:
        """Return the interval ``{y : R(x, y) <= q}``."""
        if math.isinf(q) and q > 0:
            return -math.inf, math.inf
        if self.kind == ABS_RESIDUAL:
            return mu_hat - q, mu_hat + q
        if self.kind == NORMALIZED_SQUARED:
            # the score is defined for nonnegative labels (volatilities)
            m2 = mu_hat * mu_hat
            return math.sqrt(max(0.0, m2 * (1.0 - q))), math.sqrt(m2 * (1.0 + q))
        pieces = self.invert_fn(mu_hat, q)
        if pieces and not isinstance(pieces[0], (tuple, list)):
            pieces = [pieces]
        if len(pieces) != 1:
            raise ValueError(f"level set of custom score is not an interval: {pieces}")
        lo, hi = pieces[0]
        if lo > hi:
            raise ValueError(f"custom score inversion returned an empty range ({lo}, {hi})")
        return float(lo), float(hi)


def quantile_rank(m: int, alpha: float) -> int:
    """1-based rank ``ceil((1 - alpha)(m + 1))`` of the conformal quantile."""
    return math.ceil((1.0 - alpha) * (m + 1) - _CEIL_SLACK)


def kth_smallest(scores: np.ndarray, k: int) -> float:
    """Exact ``k``-th smallest (1-based) by selection, not a full sort."""
    return float(np.partition(scores, k - 1)[k - 1])


def conformal_quantile(scores: Iterable[float], alpha: float) -> float:
    """The ``ceil((1-alpha)(m+1))``-th smallest score, ``+inf`` if that rank exceeds ``m``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    arr = np.asarray(scores if isinstance(scores, np.ndarray) else list(scores), dtype=float)
    k = quantile_rank(arr.size, alpha)
    if k > arr.size:
        return math.inf
    return kth_smallest(arr, k)


def quantile_at_level(scores: np.ndarray, level: float) -> float:
    """Like :func:`conformal_quantile` but total over all real levels.

    Levels at or below zero give an infinite bound; levels at or above one give
    a zero bound (the interval collapses onto the prediction).
    """
    if level <= 0.0:
        return math.inf
    if level >= 1.0:
        return 0.0
    k = quantile_rank(scores.size, level)
    if k > scores.size:
        return math.inf
    return kth_smallest(scores, k)


def build_interval(mu_hat: float, q: float, alpha: float, calib=(),
                   score: Optional[ScoreFunction] = None) -> PredictionInterval:
    """Interval ``{y : R(x, y) <= q}`` reported as center and half-width."""
    idx = tuple(int(i) for i in calib)
    if score is None or score.kind == ABS_RESIDUAL:
        return PredictionInterval(float(mu_hat), float(q), float(alpha), idx, len(idx))
    lo, hi = score.invert(float(mu_hat), q)
    if math.isinf(lo) or math.isinf(hi):
        return PredictionInterval(float(mu_hat), math.inf, float(alpha), idx, len(idx))
    return PredictionInterval(0.5 * (lo + hi), 0.5 * (hi - lo), float(alpha), idx, len(idx))


def realized_beta(r_test: float, calib_scores) -> float:
    """Largest level whose interval still covers: ``1 - #{r < r_test} / (m + 1)``."""
    arr = np.asarray(calib_scores, dtype=float)
    below = int(np.count_nonzero(arr < r_test))
    return 1.0 - below / (arr.size + 1)


def conformal_pvalue(null_scores, g_test: float) -> float:
    """Marginal same-class conformal p-value ``(1 + #{g_i <= g}) / (m0 + 1)``."""
    arr = np.asarray(null_scores, dtype=float)
    if arr.size == 0:
        warnings.warn("empty null calibration set; conformal p-value is 1", RuntimeWarning)
        return 1.0
    return (1.0 + np.count_nonzero(arr <= g_test)) / (arr.size + 1.0)


def conformal_pvalues(sorted_null: np.ndarray, g) -> np.ndarray:
    """Vectorized :func:`conformal_pvalue` against a pre-sorted null set."""
    g = np.asarray(g, dtype=float)
    if sorted_null.size == 0:
        return np.ones_like(g)
    return (1.0 + np.searchsorted(sorted_null, g, side="right")) / (sorted_null.size + 1.0)
