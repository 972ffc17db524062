"""Run configuration, replication orchestration and CSV ingestion."""
from __future__ import annotations

import copy
import csv
import math
import multiprocessing as mp
import os
from dataclasses import dataclass, field, fields
from typing import Any, Optional

import numpy as np
import yaml

from .conformal import ABS_RESIDUAL, NORMALIZED_SQUARED, ScoreFunction
from .core import FIXED, FULL, HOLDOUT_MODES, WINDOW, HoldoutMode
from .engine import (DtACIParams, METHODS, PICKING_METHODS, MethodSpec, RunLog,
                     StreamData, run_stream)
from .metrics import RunMetrics, ReplicationReport, evaluation_grid
from .pickers import NONADAPTIVE, PICK_KINDS, IncompatibleRules, PickRule, check_compatible
from .selectors import (DecisionDriven, Direction, FixedThreshold, LinearCapped, MeanStat,
                        MultipleTesting, QuantileStat, SelectionRule, SymmetricThreshold)
from .simlab import DEFAULT_PREDICTOR, PREDICTORS, SCENARIOS, Predictor, ScenarioSpec, generate

SELECTOR_KINDS = ("fixed", "decision", "quantile", "mean", "saffron")
SCHEMAS = ("features", "precomputed")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class IngestError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class SelectorConfig:
    kind: str = "decision"
    score: str = "mu_hat"            # "mu_hat" or "x<j>" (1-based feature column)
    direction: str = "above"
    threshold: float = 1.0           # fixed
    base: float = 1.0                # decision: base + sign * min(s / scale, cap)
    scale: float = 50.0
    cap: float = 2.0
    sign: int = -1
    theta: float = 0.7               # quantile
    window: Optional[int] = 200      # quantile / mean
    c: Optional[float] = None        # saffron: H0 is Y <= c (default base - 1)
    fdr: float = 0.2
    lam: float = 0.5
    w0: Optional[float] = None
    gamma_exponent: float = 1.6
    null_size: int = 500

    def label(self) -> str:
        if self.kind == "fixed":
            return f"fixed({self.score}>{self.threshold:g})"
        if self.kind == "decision":
            return f"decision({self.base:g})"
        if self.kind == "quantile":
            return f"quantile({self.theta:g},{self.window})"
        if self.kind == "mean":
            return f"mean({self.window})"
        return f"saffron({self.hypothesis:g})"

    @property
    def hypothesis(self) -> float:
        return self.base - 1.0 if self.c is None else float(self.c)

    def build(self, null_mu=None, null_y=None) -> SelectionRule:
        d = Direction(self.direction)
        if self.kind == "fixed":
            return FixedThreshold(self.threshold, d)
        if self.kind == "decision":
            return DecisionDriven(LinearCapped(self.base, self.scale, self.cap, self.sign), d)
        if self.kind == "quantile":
            return SymmetricThreshold(QuantileStat(self.theta), d, self.window)
        if self.kind == "mean":
            return SymmetricThreshold(MeanStat(), d, self.window)
        return MultipleTesting(null_mu, null_y, self.hypothesis, fdr=self.fdr, lam=self.lam,
                               w0=self.w0, gamma_exponent=self.gamma_exponent)

    def probe(self) -> SelectionRule:
        """A rule of the right class for compatibility checks (no data needed)."""
        if self.kind == "saffron":
            return MultipleTesting(np.zeros(1), np.zeros(1), 0.0)
        return self.build()


@dataclass
class MethodConfig:
    method: str = "CAP"
    picker: str = NONADAPTIVE
    k: Optional[int] = None
    label: Optional[str] = None
    lord_discount: str = "power"

    def spec(self, dtaci: DtACIParams) -> MethodSpec:
        return MethodSpec(self.method, PickRule(self.picker, self.k), dtaci, self.lord_discount, self.label)


@dataclass
class SourceConfig:
    path: str = ""
    schema: str = "features"
    holdout: Optional[str] = None
    train: Optional[str] = None
    null: Optional[str] = None


@dataclass
class RunConfig:
    scenario: Optional[str] = "A"
    source: Optional[SourceConfig] = None
    predictor: Optional[str] = None
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    methods: list = field(default_factory=lambda: [MethodConfig()])
    holdout: str = FULL
    window: Optional[int] = None
    alpha: float = 0.1
    horizon: int = 1000
    initial_size: int = 50
    train_size: int = 200
    reps: int = 1
    seed: int = 0
    jobs: int = 1
    stride: int = 1
    out: Optional[str] = None
    raw_logs: bool = False
    score: str = ABS_RESIDUAL
    dtaci: dict = field(default_factory=dict)
    name: str = ""

    # -- construction
    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw or {})
        if "preset" in raw:
            name = raw.pop("preset")
            if name not in PRESETS:
                raise ConfigError("preset", f"unknown preset {name!r}; known: {sorted(PRESETS)}")
            base = copy.deepcopy(PRESETS[name])
            base.update(raw)
            raw = base
        known = {f.name for f in fields(cls)} | {"method", "picker", "k"}
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown field")
        sel = raw.pop("selector", {}) or {}
        if not isinstance(sel, dict):
            raise ConfigError("selector", "must be a mapping")
        sel_known = {f.name for f in fields(SelectorConfig)}
        for key in sel:
            if key not in sel_known:
                raise ConfigError(f"selector.{key}", "unknown field")
        single = {k: raw.pop(k) for k in ("method", "picker", "k") if k in raw}
        methods = raw.pop("methods", None)
        if methods is None:
            methods = [single] if single else [{}]
        elif single:
            raise ConfigError("method", "give either 'method' or 'methods', not both")
        mcfg = []
        m_known = {f.name for f in fields(MethodConfig)}
        for i, m in enumerate(methods):
            if isinstance(m, str):
                m = {"method": m}
            for key in m:
                if key not in m_known:
                    raise ConfigError(f"methods[{i}].{key}", "unknown field")
            mcfg.append(MethodConfig(**m))
        src = raw.pop("source", None)
        if src is not None:
            s_known = {f.name for f in fields(SourceConfig)}
            for key in src:
                if key not in s_known:
                    raise ConfigError(f"source.{key}", "unknown field")
            src = SourceConfig(**src)
        cfg = cls(selector=SelectorConfig(**sel), methods=mcfg, source=src, **raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a mapping")
        return cls.from_dict(raw or {})

    def to_dict(self) -> dict:
        import dataclasses
        return dataclasses.asdict(self)

    # -- validation
    def validate(self) -> None:
        if not isinstance(self.alpha, (int, float)) or not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha", f"must lie in (0, 1), got {self.alpha!r}")
        if not isinstance(self.reps, int) or self.reps < 1:
            raise ConfigError("reps", f"must be an integer >= 1, got {self.reps!r}")
        for name in ("horizon", "initial_size", "train_size", "jobs", "stride"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if self.source is None:
            if self.scenario not in SCENARIOS:
                raise ConfigError("scenario", f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        elif self.source.schema not in SCHEMAS:
            raise ConfigError("source.schema", f"expected one of {SCHEMAS}")
        if self.predictor is not None and self.predictor not in PREDICTORS:
            raise ConfigError("predictor", f"unknown predictor {self.predictor!r}")
        if self.holdout not in HOLDOUT_MODES:
            raise ConfigError("holdout", f"expected one of {HOLDOUT_MODES}")
        if self.holdout == WINDOW and (self.window is None or self.window < 1):
            raise ConfigError("window", "window holdout needs a positive size")
        if self.score not in (ABS_RESIDUAL, NORMALIZED_SQUARED):
            raise ConfigError("score", f"unknown score {self.score!r}")
        sel = self.selector
        if sel.kind not in SELECTOR_KINDS:
            raise ConfigError("selector.kind", f"expected one of {SELECTOR_KINDS}")
        if sel.direction not in ("above", "below"):
            raise ConfigError("selector.direction", "expected 'above' or 'below'")
        if sel.kind == "quantile" and not 0.0 < sel.theta <= 1.0:
            raise ConfigError("selector.theta", "must lie in (0, 1]")
        if sel.kind == "saffron" and self.source is None and sel.null_size < 1:
            raise ConfigError("selector.null_size", "SAFFRON needs a labeled null set")
        if sel.score != "mu_hat" and not (sel.score.startswith("x") and sel.score[1:].isdigit()):
            raise ConfigError("selector.score", f"expected 'mu_hat' or 'x<j>', got {sel.score!r}")
        if not self.methods:
            raise ConfigError("methods", "at least one method is required")
        labels = set()
        probe = sel.probe()
        for i, m in enumerate(self.methods):
            if m.method not in METHODS:
                raise ConfigError(f"methods[{i}].method", f"expected one of {METHODS}")
            if m.picker not in PICK_KINDS:
                raise ConfigError(f"methods[{i}].picker", f"expected one of {PICK_KINDS}")
            if m.method not in PICKING_METHODS and m.picker != NONADAPTIVE:
                raise ConfigError(f"methods[{i}].picker", f"{m.method} uses the whole holdout; picker must be nonadaptive")
            try:
                pick = PickRule(m.picker, m.k)
                check_compatible(pick, probe)
            except IncompatibleRules as exc:
                raise ConfigError("picker+selector", str(exc)) from None
            except ValueError as exc:
                raise ConfigError(f"methods[{i}].k", str(exc)) from None
            spec = m.spec(self.dtaci_params())
            if spec.label in labels:
                raise ConfigError(f"methods[{i}].label", f"duplicate method label {spec.label!r}")
            labels.add(spec.label)

    def dtaci_params(self) -> DtACIParams:
        try:
            return DtACIParams(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in self.dtaci.items()})
        except TypeError as exc:
            raise ConfigError("dtaci", str(exc)) from None

    def method_specs(self) -> list[MethodSpec]:
        p = self.dtaci_params()
        return [m.spec(p) for m in self.methods]

    def holdout_mode(self) -> HoldoutMode:
        return HoldoutMode(self.holdout, self.window if self.holdout == WINDOW else None)

    def predictor_kind(self) -> str:
        if self.predictor is not None:
            return self.predictor
        if self.source is not None:
            return "ols"
        return DEFAULT_PREDICTOR[self.scenario]

    def meta(self, spec: MethodSpec) -> dict:
        return {"method": spec.label,
                "scenario": self.scenario if self.source is None else os.path.basename(self.source.path),
                "selector": self.selector.label(), "picker": str(spec.pick)}


def _preset(**kw) -> dict:
    return kw


PRESETS: dict[str, dict] = {
    # fixed initial holdout, decision-driven selection
    "fcr-fixed-holdout": _preset(
        scenario="A", selector={"kind": "decision", "base": 1.0}, holdout=FIXED,
        methods=[{"method": "CAP"}], alpha=0.1, horizon=1000, reps=500, seed=101),
    # symmetric quantile selection over a moving window
    "quantile-swap": _preset(
        scenario="B", selector={"kind": "quantile", "theta": 0.7, "window": 200},
        holdout=FULL,
        methods=[{"method": "CAP", "picker": "swap", "label": "CAP"}, {"method": "OCP"},
                 {"method": "LORD-CI"}],
        alpha=0.1, horizon=1000, reps=500, seed=202),
    "scc-fixed-rule": _preset(
        scenario="A", selector={"kind": "fixed", "score": "x1", "threshold": 1.0}, holdout=FULL,
        methods=[{"method": "CAP"}], alpha=0.1, horizon=1000, reps=100, seed=303),
    "express-comparison": _preset(
        scenario="CompareCase1",
        selector={"kind": "decision", "base": 2.0, "scale": 20.0, "cap": 2.0},
        holdout=FULL,
        methods=[{"method": "CAP", "picker": "intersection", "label": "CAP-ada"},
                 {"method": "CAP", "picker": "express", "label": "EXPRESS"},
                 {"method": "CAP", "label": "CAP-nonada"},
                 {"method": "CAP", "picker": "kcap", "k": 20, "label": "K-CAP"},
                 {"method": "CAP", "picker": "kexpress", "k": 20, "label": "K-EXPRESS"}],
        alpha=0.4, horizon=200, reps=2000, seed=505),
    "dtaci-change-point": _preset(
        scenario="ChangePoint", selector={"kind": "quantile", "theta": 0.7, "window": 200},
        holdout=FULL,
        methods=[{"method": "CAP-DtACI", "picker": "swap", "label": "CAP-DtACI"},
                 {"method": "CAP", "picker": "swap", "label": "CAP"}],
        dtaci={"decaying": True}, alpha=0.1, horizon=2000, reps=200, seed=606),
    "spending-baselines": _preset(
        scenario="B", selector={"kind": "decision", "base": 4.0}, holdout=FULL,
        methods=[{"method": "CAP"}, {"method": "LORD-CI"}, {"method": "eLOND-CI"}],
        alpha=0.1, horizon=1000, reps=500, seed=808),
    "saffron-selection": _preset(
        scenario="B", selector={"kind": "saffron", "base": 4.0, "fdr": 0.2, "null_size": 500},
        holdout=FULL, methods=[{"method": "CAP", "picker": "intersection"}, {"method": "OCP"}],
        alpha=0.1, horizon=1000, reps=100, seed=909),
    "dtaci-defaults": _preset(
        scenario="B", selector={"kind": "quantile", "theta": 0.7, "window": 200}, holdout=FULL,
        methods=[{"method": "CAP-DtACI", "picker": "swap"}, {"method": "DtACI-sel"}],
        dtaci={"gammas": [0.008, 0.016, 0.032, 0.064, 0.128, 0.256], "interval_len": 200,
               "decaying": True},
        alpha=0.1, horizon=1000, reps=100, seed=707),
}


# --------------------------------------------------------------------------
# one replication


def _selection_scores(cfg: RunConfig, x: Optional[np.ndarray], mu: np.ndarray) -> np.ndarray:
    s = cfg.selector.score
    if s == "mu_hat":
        return mu
    j = int(s[1:])
    if x is None or not 1 <= j <= x.shape[1]:
        raise ConfigError("selector.score", f"feature column {s} is not available")
    return x[:, j - 1]


def replication_seeds(master_seed: int, rep: int, n_methods: int):
    ss = np.random.SeedSequence([int(master_seed), int(rep)])
    data_seed, method_seed = ss.spawn(2)
    return data_seed, method_seed.spawn(n_methods)


def simulate_stream(cfg: RunConfig, rep: int):
    """Data, selection rule and per-method generators for replication ``rep``."""
    specs = cfg.method_specs()
    data_seed, method_seeds = replication_seeds(cfg.seed, rep, len(specs))
    rng = np.random.default_rng(data_seed)
    null_size = cfg.selector.null_size if cfg.selector.kind == "saffron" else 0
    spec = ScenarioSpec(cfg.scenario, cfg.train_size, cfg.initial_size, cfg.horizon, null_size)
    ds = generate(spec, rng)
    pred = Predictor(cfg.predictor_kind(), seed=int(rng.integers(2**31 - 1)))
    pred.fit(ds.train.x, ds.train.y)
    mu_h = pred.predict(ds.holdout.x)
    mu_o = pred.predict(ds.online.x)
    null_mu = pred.predict(ds.null.x) if null_size else None
    rule = cfg.selector.build(null_mu, ds.null.y if null_size else None)
    data = StreamData(mu_h, _selection_scores(cfg, ds.holdout.x, mu_h), ds.holdout.y,
                      mu_o, _selection_scores(cfg, ds.online.x, mu_o), ds.online.y,
                      ScoreFunction(cfg.score), ds.holdout.t, ds.online.t)
    return data, rule, [np.random.default_rng(s) for s in method_seeds]


def run_replication(cfg: RunConfig, rep: int, data_override=None):
    if data_override is None:
        data, rule, rngs = simulate_stream(cfg, rep)
    else:
        data, rule = data_override
        _, seeds = replication_seeds(cfg.seed, rep, len(cfg.methods))
        rngs = [np.random.default_rng(s) for s in seeds]
    logs, _ = run_stream(data, rule, cfg.method_specs(), alpha=cfg.alpha,
                         holdout_mode=cfg.holdout_mode(), rngs=rngs)
    return logs


# --------------------------------------------------------------------------
# many replications


@dataclass
class RunResult:
    config: RunConfig
    reports: list            # one ReplicationReport per method, in config order
    raw: list = field(default_factory=list)    # (rep, RunLog) when raw logs are kept

    def report(self, label: str) -> ReplicationReport:
        for r in self.reports:
            if r.meta["method"] == label:
                return r
        raise KeyError(label)


_WORKER: dict[str, Any] = {}


def _init_worker(cfg, data_override):
    _WORKER["cfg"] = cfg
    _WORKER["data"] = data_override


def _work(rep: int):
    return rep, run_replication(_WORKER["cfg"], rep, _WORKER["data"])


def run(cfg: RunConfig, *, data_override=None, keep_raw: Optional[bool] = None) -> RunResult:
    """Execute ``cfg.reps`` replications and aggregate them per method.

    Replications are folded in index order whatever ``cfg.jobs`` is, so serial
    and parallel runs produce identical floating-point sums.
    """
    keep_raw = cfg.raw_logs if keep_raw is None else keep_raw
    specs = cfg.method_specs()
    T = data_override[0].horizon if data_override is not None else cfg.horizon
    grid = evaluation_grid(T, cfg.stride)
    reports = [ReplicationReport(grid, cfg.meta(s)) for s in specs]
    raw = []

    def fold(rep, logs):
        for report, log in zip(reports, logs):
            report.add(RunMetrics.from_log(log))
            if keep_raw:
                raw.append((rep, log))

    if cfg.jobs <= 1 or cfg.reps == 1:
        for rep in range(cfg.reps):
            fold(rep, run_replication(cfg, rep, data_override))
    else:
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
        with ctx.Pool(cfg.jobs, initializer=_init_worker, initargs=(cfg, data_override)) as pool:
            for rep, logs in pool.imap(_work, range(cfg.reps), chunksize=max(1, cfg.reps // (4 * cfg.jobs))):
                fold(rep, logs)
    return RunResult(cfg, reports, raw)


# --------------------------------------------------------------------------
# raw logs

RAW_COLUMNS = ("rep", "t", "method", "scenario", "selector", "picker", "S_t", "alpha_t",
               "calib_size", "half_width", "covered")


def _num(v: float) -> str:
    if math.isnan(v):
        return "NA"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def write_raw_logs(path: str, result: RunResult) -> None:
    metas = {r.meta["method"]: r.meta for r in result.reports}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_COLUMNS)
        for rep, log in result.raw:
            meta = metas[log.label]
            for t in range(len(log.selected)):
                cov = int(log.covered[t])
                w.writerow([rep, t, log.label, meta["scenario"], meta["selector"], meta["picker"],
                            int(log.selected[t]), _num(log.level[t]),
                            "NA" if log.calib_size[t] < 0 else int(log.calib_size[t]),
                            _num(log.half_width[t]), "NA" if cov < 0 else cov])


def read_raw_logs(path: str) -> tuple[dict, dict]:
    """Return ``{(method, rep): RunLog}`` and ``{method: meta}``."""
    rows: dict = {}
    metas: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in RAW_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            key = (row["method"], int(row["rep"]))
            metas.setdefault(row["method"], {k: row[k] for k in ("method", "scenario", "selector", "picker")})
            try:
                rows.setdefault(key, []).append((
                    int(row["t"]), int(row["S_t"]), _parse(row["alpha_t"]),
                    -1 if row["calib_size"] == "NA" else int(row["calib_size"]),
                    _parse(row["half_width"]), -1 if row["covered"] == "NA" else int(row["covered"])))
            except ValueError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
    logs = {}
    for key, items in rows.items():
        items.sort()
        ts = [i[0] for i in items]
        if ts != list(range(len(ts))):
            raise IngestError(f"{path}: method {key[0]} rep {key[1]} has gaps in t")
        cols = list(zip(*items))
        logs[key] = RunLog(key[0], np.array(cols[1], dtype=np.int8), np.array(cols[2]),
                           np.array(cols[3], dtype=np.int64), np.array(cols[4]),
                           np.array(cols[5], dtype=np.int8))
    return logs, metas


def _parse(s: str) -> float:
    return math.nan if s == "NA" else float(s)


def report_from_raw(path: str, stride: int = 1) -> list[ReplicationReport]:
    logs, metas = read_raw_logs(path)
    out = []
    for method in metas:
        reps = sorted(r for (m, r) in logs if m == method)
        T = len(logs[(method, reps[0])].selected)
        rep_obj = ReplicationReport(evaluation_grid(T, stride), metas[method])
        for r in reps:
            rep_obj.add(RunMetrics.from_log(logs[(method, r)]))
        out.append(rep_obj)
    return out


# --------------------------------------------------------------------------
# CSV ingestion


@dataclass
class IngestedBlock:
    t: np.ndarray
    y: np.ndarray
    x: Optional[np.ndarray] = None
    mu_hat: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.y)

    def slice(self, lo, hi) -> "IngestedBlock":
        cut = lambda a: None if a is None else a[lo:hi]
        return IngestedBlock(self.t[lo:hi], self.y[lo:hi], cut(self.x), cut(self.mu_hat), cut(self.v))


def ingest(path: str, schema: str = "features", ordered: bool = True) -> IngestedBlock:
    """Read a labeled CSV: ``t, x_1..x_d, y`` or ``t, mu_hat, v, y``.

    ``ordered`` demands strictly increasing ``t``; training files may skip it.
    """
    if schema not in SCHEMAS:
        raise IngestError(f"unknown schema {schema!r}; expected one of {SCHEMAS}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        body = list(reader)
    if schema == "features":
        xcols = sorted((h for h in header if h.startswith("x_") and h[2:].isdigit()), key=lambda h: int(h[2:]))
        need = ["t", "y"]
        if not xcols:
            raise IngestError(f"{path}: missing feature columns x_1..x_d")
        expect = [f"x_{j}" for j in range(1, len(xcols) + 1)]
        if xcols != expect:
            raise IngestError(f"{path}: feature columns must be x_1..x_{len(xcols)} without gaps")
    else:
        xcols = []
        need = ["t", "mu_hat", "v", "y"]
    missing = [c for c in need if c not in header]
    if missing:
        raise IngestError(f"{path}: missing columns {missing}")
    wanted = need + xcols
    idx = {c: header.index(c) for c in wanted}
    vals = {c: np.empty(len(body)) for c in wanted}
    for i, row in enumerate(body):
        for c in wanted:
            try:
                vals[c][i] = float(row[idx[c]])
            except (ValueError, IndexError):
                cell = row[idx[c]] if idx[c] < len(row) else "<missing>"
                raise IngestError(f"{path}: row {i + 2}, column {c!r}: non-numeric value {cell!r}") from None
    t = vals["t"]
    if np.any(t != np.round(t)):
        raise IngestError(f"{path}: column 't' must hold integers")
    t = t.astype(np.int64)
    bad = np.flatnonzero(np.diff(t) <= 0) if ordered else np.empty(0)
    if bad.size:
        i = int(bad[0]) + 1
        raise IngestError(f"{path}: row {i + 2}: t={t[i]} is not greater than the previous t={t[i - 1]}")
    if schema == "features":
        x = np.column_stack([vals[c] for c in xcols])
        return IngestedBlock(t, vals["y"], x=x)
    return IngestedBlock(t, vals["y"], mu_hat=vals["mu_hat"], v=vals["v"])


def ingest_stream(cfg: RunConfig):
    """Build ``(StreamData, rule)`` from the CSV files named in ``cfg.source``."""
    src = cfg.source
    if src is None:
        raise ConfigError("source", "ingest-run needs a 'source' section")
    stream = ingest(src.path, src.schema)
    if src.holdout:
        hold = ingest(src.holdout, src.schema)
        online = stream
    else:
        n = cfg.initial_size
        if len(stream) <= n:
            raise IngestError(f"{src.path}: {len(stream)} rows leave no online stream after a "
                              f"warm-up holdout of {n}")
        hold, online = stream.slice(0, n), stream.slice(n, None)
    if hold.t[-1] >= online.t[0]:
        raise IngestError("holdout times must precede the online stream")
    null = ingest(src.null, src.schema) if src.null else None
    if src.schema == "features":
        if not src.train:
            raise ConfigError("source.train", "the features schema needs a training file")
        train = ingest(src.train, "features", ordered=False)
        pred = Predictor(cfg.predictor_kind()).fit(train.x, train.y)
        for blk in filter(None, (hold, online, null)):
            blk.mu_hat = pred.predict(blk.x)
            blk.v = _selection_scores(cfg, blk.x, blk.mu_hat)
    elif cfg.selector.score != "mu_hat":
        raise ConfigError("selector.score", "the precomputed schema carries its own score column v")
    if cfg.selector.kind == "saffron" and null is None:
        raise ConfigError("source.null", "SAFFRON selection needs a labeled null file")
    rule = cfg.selector.build(null.mu_hat if null else None, null.y if null else None)
    # online indices restart at 0 so that time-indexed rules see 0, 1, ...
    data = StreamData(hold.mu_hat, hold.v, hold.y, online.mu_hat, online.v, online.y,
                      ScoreFunction(cfg.score), np.arange(-len(hold), 0), np.arange(len(online)))
    return data, rule
