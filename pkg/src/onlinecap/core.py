"""Domain types shared by every module: stream records, the labeled holdout
buffer, the selection trace and prediction intervals.

Time indices are global: the initial labeled block lives at ``-n..-1`` and the
online stream at ``0, 1, ...``.  Labels arrive with a one-step delay, so when
the decision on ``X_t`` is made the buffer holds records with index ``< t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

FIXED = "fixed"
FULL = "full"
WINDOW = "window"
HOLDOUT_MODES = (FIXED, FULL, WINDOW)


@dataclass
class StreamRecord:
    """One time-indexed unit of the stream.

    ``r`` stays ``None`` until the label is revealed.
    """

    t: int
    mu_hat: float
    v: float
    y: Optional[float] = None
    r: Optional[float] = None
    x: Optional[np.ndarray] = None

    @property
    def labeled(self) -> bool:
        return self.y is not None and self.r is not None


@dataclass(frozen=True)
class HoldoutMode:
    kind: str = FULL
    k: Optional[int] = None

    def __post_init__(self):
        if self.kind not in HOLDOUT_MODES:
            raise ValueError(f"unknown holdout mode {self.kind!r}")
        if self.kind == WINDOW and (self.k is None or self.k < 1):
            raise ValueError("window holdout needs a positive size k")

    @classmethod
    def fixed(cls) -> "HoldoutMode":
        return cls(FIXED)

    @classmethod
    def full(cls) -> "HoldoutMode":
        return cls(FULL)

    @classmethod
    def window(cls, k: int) -> "HoldoutMode":
        return cls(WINDOW, int(k))

    def __str__(self) -> str:
        return f"window({self.k})" if self.kind == WINDOW else self.kind


class _Growable:
    """Append-only float columns backed by preallocated numpy storage."""

    def __init__(self, names: Sequence[str], capacity: int, dtypes: dict):
        self._names = tuple(names)
        self._cap = max(int(capacity), 16)
        self._len = 0
        self._cols = {n: np.empty(self._cap, dtype=dtypes.get(n, float)) for n in names}

    def __len__(self) -> int:
        return self._len

    def append(self, **values) -> None:
        if self._len == self._cap:
            self._cap *= 2
            for n in self._names:
                col = np.empty(self._cap, dtype=self._cols[n].dtype)
                col[: self._len] = self._cols[n][: self._len]
                self._cols[n] = col
        i = self._len
        for n in self._names:
            self._cols[n][i] = values[n]
        self._len += 1

    def column(self, name: str, lo: int = 0, hi: Optional[int] = None) -> np.ndarray:
        hi = self._len if hi is None else hi
        return self._cols[name][lo:hi]


class HoldoutBuffer:
    """Labeled history ``H_t`` in fixed, full or moving-window mode.

    Entries are exposed as read-only numpy views (``times``, ``v``, ``mu_hat``,
    ``y``, ``r``) ordered by time.  ``advance`` mutates the buffer in place and
    returns it.
    """

    def __init__(self, mode: HoldoutMode, initial: Sequence[StreamRecord] = (), *,
                 capacity: int = 256):
        self.mode = mode
        self._store = _Growable(("t", "v", "mu_hat", "y", "r"),
                                capacity + len(initial), {"t": np.int64})
        for rec in initial:
            self._push(rec)
        self.initial_size = len(self._store)

    @classmethod
    def from_arrays(cls, mode: HoldoutMode, t, v, mu_hat, y, r, *, capacity: int = 256):
        buf = cls(mode, capacity=capacity + len(t))
        for row in zip(t, v, mu_hat, y, r):
            buf._store.append(t=row[0], v=row[1], mu_hat=row[2], y=row[3], r=row[4])
        buf._check_sorted()
        buf.initial_size = len(buf._store)
        return buf

    def _check_sorted(self):
        ts = self._store.column("t")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("holdout times must be strictly increasing")

    def _push(self, rec: StreamRecord) -> None:
        if not rec.labeled:
            raise ValueError(f"record t={rec.t} has no revealed label")
        n = len(self._store)
        if n and rec.t <= self._store.column("t")[n - 1]:
            raise ValueError(f"record t={rec.t} is not newer than the buffer")
        self._store.append(t=rec.t, v=rec.v, mu_hat=rec.mu_hat, y=rec.y, r=rec.r)

    def advance(self, revealed: StreamRecord) -> "HoldoutBuffer":
        """Add a newly labeled record according to the buffer mode."""
        if not revealed.labeled:
            raise ValueError(f"record t={revealed.t} has no revealed label")
        if self.mode.kind == FIXED:
            return self
        self._push(revealed)
        return self

    def advance_values(self, t: int, v: float, mu_hat: float, y: float, r: float) -> None:
        # hot path for the engines; the caller guarantees ordering
        if self.mode.kind != FIXED:
            self._store.append(t=t, v=v, mu_hat=mu_hat, y=y, r=r)

    @property
    def _bounds(self) -> tuple[int, int]:
        hi = len(self._store)
        if self.mode.kind == FIXED:
            return 0, self.initial_size
        if self.mode.kind == WINDOW:
            return max(0, hi - self.mode.k), hi
        return 0, hi

    def _col(self, name: str) -> np.ndarray:
        lo, hi = self._bounds
        return self._store.column(name, lo, hi)

    @property
    def times(self) -> np.ndarray:
        return self._col("t")

    @property
    def v(self) -> np.ndarray:
        return self._col("v")

    @property
    def mu_hat(self) -> np.ndarray:
        return self._col("mu_hat")

    @property
    def y(self) -> np.ndarray:
        return self._col("y")

    @property
    def r(self) -> np.ndarray:
        return self._col("r")

    def __len__(self) -> int:
        lo, hi = self._bounds
        return hi - lo

    def recent_v(self, k: Optional[int]) -> np.ndarray:
        """Selection scores of the ``k`` most recent entries (all if ``k`` is None)."""
        v = self.v
        return v if k is None or k >= len(v) else v[len(v) - k:]

    def entries(self) -> list[StreamRecord]:
        return [StreamRecord(t=int(t), v=float(v), mu_hat=float(m), y=float(y), r=float(r))
                for t, v, m, y, r in zip(self.times, self.v, self.mu_hat, self.y, self.r)]


class SelectionTrace:
    """Realized decisions ``S_0..S_{t-1}`` with the online selection scores.

    Rules that need per-step state beyond the decision bits (SAFFRON) keep it
    in ``rule_state``.
    """

    def __init__(self, capacity: int = 256):
        self._store = _Growable(("s", "v"), capacity, {"s": np.int8})
        self.cum_selected = 0
        self.selection_times: list[int] = []
        self.rule_state: dict[str, Any] = {}

    def __len__(self) -> int:
        return len(self._store)

    def append(self, decision: bool, v: float) -> None:
        t = len(self._store)
        self._store.append(s=1 if decision else 0, v=v)
        if decision:
            self.cum_selected += 1
            self.selection_times.append(t)

    @property
    def decisions(self) -> np.ndarray:
        return self._store.column("s")

    @property
    def scores(self) -> np.ndarray:
        return self._store.column("v")

    def cum_before(self) -> np.ndarray:
        """``sum_{j<i} S_j`` for every recorded ``i`` (plus the current one)."""
        out = np.zeros(len(self) + 1, dtype=np.int64)
        np.cumsum(self.decisions, out=out[1:])
        return out


@dataclass(frozen=True)
class PredictionInterval:
    center: float
    half_width: float
    level: float
    calib_indices: tuple = field(default=(), repr=False)
    calib_size: int = 0

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width

    @property
    def length(self) -> float:
        return 2.0 * self.half_width

    @property
    def infinite(self) -> bool:
        return math.isinf(self.half_width)

    def covers(self, y: float) -> bool:
        if self.infinite:
            return True
        return abs(y - self.center) <= self.half_width
