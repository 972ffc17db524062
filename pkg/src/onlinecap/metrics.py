"""Per-run FCP and length accounting, and cross-replication aggregation.

Conventions
-----------
* ``fcp[t] = #misses among selected s <= t / max(1, #selected s <= t)``.
  An infinite interval always covers.
* ``length`` is the full width ``2 * half_width``.
* ``mean_len[t]`` is the running mean of finite lengths emitted up to ``t``
  (NaN before the first finite one); the report averages it over runs.
* ``median_len``, ``inf_freq`` and ``mean_calib`` at ``t`` are taken over the
  runs that selected at ``t``: median length (infinite included), share of
  infinite intervals, and mean calibration-set size.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

REPORT_COLUMNS = ("t", "method", "scenario", "selector", "picker", "fcr", "fcr_se",
                  "mean_len", "median_len", "inf_freq", "mean_calib")
NA = -1


@dataclass
class RunMetrics:
    """Per-time metrics of one run, filled incrementally or from a run log."""

    horizon: int
    fcp: np.ndarray = field(init=False)
    mean_len: np.ndarray = field(init=False)
    length: np.ndarray = field(init=False)       # NaN when not selected
    calib: np.ndarray = field(init=False)        # -1 when not selected
    selected: np.ndarray = field(init=False)
    misses: int = 0
    n_selected: int = 0
    _len_sum: float = 0.0
    _len_count: int = 0
    _next: int = 0

    def __post_init__(self):
        T = self.horizon
        self.fcp = np.zeros(T)
        self.mean_len = np.full(T, np.nan)
        self.length = np.full(T, np.nan)
        self.calib = np.full(T, -1, dtype=np.int64)
        self.selected = np.zeros(T, dtype=np.int8)

    @property
    def infinite(self) -> np.ndarray:
        return np.isinf(self.length)

    def update(self, t: int, selected: bool, covered: int = NA,
               half_width: float = math.nan, calib_size: int = -1) -> "RunMetrics":
        if t != self._next:
            raise ValueError(f"expected step {self._next}, got {t}")
        if selected:
            if covered not in (0, 1):
                raise ValueError(f"selected step {t} needs covered in {{0, 1}}, got {covered}")
            if math.isinf(half_width) and covered == 0:
                raise ValueError(f"step {t}: an infinite interval cannot miss")
            self.n_selected += 1
            self.misses += 1 - covered
            self.selected[t] = 1
            self.length[t] = 2.0 * half_width
            self.calib[t] = calib_size
            if math.isfinite(half_width):
                self._len_sum += 2.0 * half_width
                self._len_count += 1
        elif covered != NA:
            raise ValueError(f"step {t} was not selected but covered={covered}")
        self.fcp[t] = self.misses / max(1, self.n_selected)
        if self._len_count:
            self.mean_len[t] = self._len_sum / self._len_count
        self._next += 1
        return self

    @classmethod
    def from_log(cls, log) -> "RunMetrics":
        """Vectorized equivalent of feeding every row of a run log to ``update``."""
        sel = np.asarray(log.selected, dtype=np.int8)
        T = len(sel)
        m = cls(T)
        cov = np.asarray(log.covered)
        if np.any((sel == 1) & (cov == NA)) or np.any((sel == 0) & (cov != NA)):
            raise ValueError("covered must be NA exactly on unselected steps")
        hw = np.asarray(log.half_width, dtype=float)
        miss = np.where(sel == 1, 1 - cov, 0)
        if np.any(miss[np.isinf(hw)] > 0):
            raise ValueError("an infinite interval cannot miss")
        n_sel = np.cumsum(sel)
        m.fcp = np.cumsum(miss) / np.maximum(1, n_sel)
        length = np.where(sel == 1, 2.0 * hw, np.nan)
        finite = np.isfinite(length)
        cnt = np.cumsum(finite)
        total = np.cumsum(np.where(finite, length, 0.0))
        with np.errstate(invalid="ignore", divide="ignore"):
            m.mean_len = np.where(cnt > 0, total / np.maximum(cnt, 1), np.nan)
        m.length = length
        m.calib = np.where(sel == 1, np.asarray(log.calib_size, dtype=np.int64), -1)
        m.selected = sel
        m.misses = int(miss.sum())
        m.n_selected = int(n_sel[-1]) if T else 0
        m._len_sum = float(total[-1]) if T else 0.0
        m._len_count = int(cnt[-1]) if T else 0
        m._next = T
        return m


def fcp_update(metrics: RunMetrics, t: int, selected: bool, covered: int = NA,
               half_width: float = math.nan, calib_size: int = -1) -> RunMetrics:
    return metrics.update(t, selected, covered, half_width, calib_size)


def evaluation_grid(horizon: int, stride: int = 1) -> np.ndarray:
    """Every ``stride``-th step, always ending at ``horizon - 1``."""
    if stride < 1:
        raise ValueError("stride must be positive")
    grid = np.arange(0, horizon, stride)
    if grid[-1] != horizon - 1:
        grid = np.r_[grid, horizon - 1]
    return grid


@dataclass
class ReplicationReport:
    """Sums over runs on a shared grid; ``merge`` is associative and commutative."""

    grid: np.ndarray
    meta: dict
    n_runs: int = 0
    fcp_sum: Optional[np.ndarray] = None
    fcp_sq: Optional[np.ndarray] = None
    len_sum: Optional[np.ndarray] = None
    len_runs: Optional[np.ndarray] = None
    sel_count: Optional[np.ndarray] = None
    inf_count: Optional[np.ndarray] = None
    calib_sum: Optional[np.ndarray] = None
    lengths: list = field(default_factory=list)      # per run: length at grid (NaN if unselected)

    def __post_init__(self):
        G = len(self.grid)
        for name, dt in (("fcp_sum", float), ("fcp_sq", float), ("len_sum", float),
                         ("len_runs", np.int64), ("sel_count", np.int64),
                         ("inf_count", np.int64), ("calib_sum", np.int64)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(G, dtype=dt))

    def add(self, run: RunMetrics) -> "ReplicationReport":
        if run.horizon <= self.grid[-1]:
            raise ValueError(f"run of length {run.horizon} does not reach grid end {self.grid[-1]}")
        g = self.grid
        fcp = run.fcp[g]
        self.fcp_sum += fcp
        self.fcp_sq += fcp * fcp
        ml = run.mean_len[g]
        ok = ~np.isnan(ml)
        self.len_sum += np.where(ok, ml, 0.0)
        self.len_runs += ok
        sel = run.selected[g].astype(np.int64)
        self.sel_count += sel
        self.inf_count += run.infinite[g]
        self.calib_sum += np.where(sel == 1, run.calib[g], 0)
        self.lengths.append(run.length[g].copy())
        self.n_runs += 1
        return self

    def merge(self, other: "ReplicationReport") -> "ReplicationReport":
        if not np.array_equal(self.grid, other.grid):
            raise ValueError("cannot merge reports on different evaluation grids")
        out = ReplicationReport(self.grid.copy(), dict(self.meta), self.n_runs + other.n_runs)
        for name in ("fcp_sum", "fcp_sq", "len_sum", "len_runs", "sel_count", "inf_count", "calib_sum"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        out.lengths = self.lengths + other.lengths
        return out

    # derived columns
    @property
    def fcr(self) -> np.ndarray:
        return self.fcp_sum / self.n_runs

    @property
    def fcr_se(self) -> np.ndarray:
        n = self.n_runs
        if n < 2:
            return np.zeros(len(self.grid))
        var = np.maximum(self.fcp_sq - self.fcp_sum ** 2 / n, 0.0) / (n - 1)
        return np.sqrt(var / n)

    @staticmethod
    def _ratio(num, den):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / np.maximum(den, 1), np.nan)

    @property
    def mean_len(self) -> np.ndarray:
        return self._ratio(self.len_sum, self.len_runs)

    @property
    def inf_freq(self) -> np.ndarray:
        return self._ratio(self.inf_count.astype(float), self.sel_count)

    @property
    def mean_calib(self) -> np.ndarray:
        return self._ratio(self.calib_sum.astype(float), self.sel_count)

    @property
    def median_len(self) -> np.ndarray:
        if not self.lengths:
            return np.full(len(self.grid), np.nan)
        mat = np.vstack(self.lengths)
        out = np.full(len(self.grid), np.nan)
        for j in range(mat.shape[1]):
            col = mat[:, j]
            col = col[~np.isnan(col)]
            if col.size:
                out[j] = np.median(col)
        return out

    def rows(self) -> list[dict]:
        cols = {"fcr": self.fcr, "fcr_se": self.fcr_se, "mean_len": self.mean_len,
                "median_len": self.median_len, "inf_freq": self.inf_freq,
                "mean_calib": self.mean_calib}
        out = []
        for j, t in enumerate(self.grid):
            row = {"t": int(t), "method": self.meta.get("method", ""),
                   "scenario": self.meta.get("scenario", ""),
                   "selector": self.meta.get("selector", ""),
                   "picker": self.meta.get("picker", "")}
            row.update({k: float(v[j]) for k, v in cols.items()})
            out.append(row)
        return out

    def at(self, t: int) -> dict:
        hit = np.flatnonzero(self.grid == t)
        if not hit.size:
            raise KeyError(f"t={t} is not on the evaluation grid")
        return self.rows()[int(hit[0])]


def aggregate(runs: Iterable[RunMetrics], grid: np.ndarray, meta: Optional[dict] = None) -> ReplicationReport:
    report = ReplicationReport(np.asarray(grid), dict(meta or {}))
    for run in runs:
        report.add(run)
    if report.n_runs == 0:
        raise ValueError("aggregate needs at least one run")
    return report


def merge(reports: Sequence[ReplicationReport]) -> ReplicationReport:
    out = reports[0]
    for r in reports[1:]:
        out = out.merge(r)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def report_csv(reports: Sequence[ReplicationReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for rep in reports:
        for row in rep.rows():
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_json(reports: Sequence[ReplicationReport]) -> str:
    rows = [{c: (_fmt(row[c]) if isinstance(row[c], float) and not math.isfinite(row[c]) else row[c])
             for c in REPORT_COLUMNS} for rep in reports for row in rep.rows()]
    return json.dumps(rows, indent=1)
