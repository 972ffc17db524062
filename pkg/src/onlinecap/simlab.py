"""Synthetic scenarios and simple frozen predictors.

Each scenario produces four disjoint labeled blocks drawn in a fixed order
(train, additional null set, initial holdout, online stream) from one
generator, so a seed pins the whole replication.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

SCENARIOS = ("A", "B", "C", "IidB", "SlowShift", "ChangePoint", "ArmaSeries",
             "CompareCase1", "CompareCase2")

BETA_A = np.r_[np.ones(5), -np.ones(5)]
CHANGE_POINT = 200
ARMA_PHI = 0.99
ARMA_THETA = 0.99
ARMA_BURN_IN = 2000


@dataclass
class ScenarioSpec:
    kind: str
    train_size: int = 200
    initial_size: int = 50
    horizon: int = 1000
    null_size: int = 0
    dim: int = 10

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}; expected one of {SCENARIOS}")
        if self.kind == "CompareCase2":
            self.dim = 1
        for name in ("train_size", "initial_size", "horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.null_size < 0:
            raise ValueError("null_size must be nonnegative")


@dataclass
class Block:
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    train: Block
    null: Block
    holdout: Block
    online: Block


# --------------------------------------------------------------------------
# conditional means


def mean_a(x):
    return x @ BETA_A


def mean_b(x):
    return x[:, 0] + 2 * x[:, 1] + 3 * x[:, 2] ** 2


def mean_c(x):
    upper = x[:, 1] > -0.4
    return np.where(upper, 4 * (x[:, 0] + 1) * np.abs(x[:, 2]), 4 * (x[:, 0] - 1))


def mean_after_change(x):
    return -2 * x[:, 0] - x[:, 1] + 3 * x[:, 2] ** 2


def mean_slow_shift(x, t):
    t = np.asarray(t, dtype=float)
    return ((1 - t / 500) * x[:, 0] + (2 + np.sin(np.pi * t / 200)) * x[:, 1]
            + (3 - t / 500) * x[:, 2] ** 2)


def mean_arma(x):
    return 2 * np.sin(np.pi * x[:, 0] * x[:, 1]) + 10 * x[:, 2] ** 2 + 5 * x[:, 3] + 2 * x[:, 4]


def conditional_mean(kind: str, x: np.ndarray, t: Optional[np.ndarray] = None) -> np.ndarray:
    """``E[Y | X, t]``; ``t`` is the global index (online points are ``t >= 0``)."""
    if t is None:
        t = np.full(len(x), -1)
    t = np.asarray(t)
    if kind in ("A", "CompareCase1"):
        return mean_a(x)
    if kind in ("B", "IidB"):
        return mean_b(x)
    if kind == "C":
        return mean_c(x)
    if kind == "ChangePoint":
        return np.where(t > CHANGE_POINT, mean_after_change(x), mean_b(x))
    if kind == "SlowShift":
        return np.where(t >= 0, mean_slow_shift(x, np.maximum(t, 0)), mean_b(x))
    if kind == "ArmaSeries":
        return mean_arma(x) / 4
    if kind == "CompareCase2":
        return x[:, 0]
    raise ValueError(kind)


def noise_sd(kind: str, x: np.ndarray, t: Optional[np.ndarray] = None) -> np.ndarray:
    """Noise standard deviation for the i.i.d.-noise scenarios."""
    if kind in ("A", "CompareCase1"):
        return 1 + np.abs(mean_a(x))
    if kind == "C":
        # N(0, 1 + |X4|) read as a variance
        return np.sqrt(1 + np.abs(x[:, 3]))
    if kind == "CompareCase2":
        # N(0, X/2) read as a variance
        return np.sqrt(x[:, 0] / 2)
    return np.ones(len(x))


def arma_noise(rng: np.random.Generator, size: int, phi: float = ARMA_PHI,
               theta: float = ARMA_THETA, burn_in: int = ARMA_BURN_IN) -> np.ndarray:
    """``xi_{t+1} = phi xi_t + eps_{t+1} + theta eps_t`` with standard normal innovations."""
    eps = rng.standard_normal(size + burn_in + 1)
    xi = np.zeros(size + burn_in)
    prev = 0.0
    for i in range(size + burn_in):
        prev = phi * prev + eps[i + 1] + theta * eps[i]
        xi[i] = prev
    return xi[burn_in:]


def arma_lag1_autocorrelation(phi: float = ARMA_PHI, theta: float = ARMA_THETA) -> float:
    return (1 + phi * theta) * (phi + theta) / (1 + 2 * phi * theta + theta ** 2)


def _features(rng, kind, size, dim):
    if kind == "CompareCase2":
        return rng.uniform(0.0, 2.0, size=(size, 1))
    return rng.uniform(-2.0, 2.0, size=(size, dim))


def generate(spec: ScenarioSpec, rng: np.random.Generator) -> Dataset:
    """Draw train, null, initial holdout and online blocks for ``spec``."""
    sizes = (spec.train_size, spec.null_size, spec.initial_size, spec.horizon)
    total = sum(sizes)
    x = _features(rng, spec.kind, total, spec.dim)
    # global time: the training/null blocks sit before the holdout and are
    # never part of the stream; they use the pre-shift distribution
    n = spec.initial_size
    t = np.concatenate([np.full(sizes[0] + sizes[1], -(n + 1)), np.arange(-n, spec.horizon)])
    mean = conditional_mean(spec.kind, x, t)
    if spec.kind == "ArmaSeries":
        y = (mean_arma(x) + arma_noise(rng, total)) / 4
    else:
        y = mean + noise_sd(spec.kind, x, t) * rng.standard_normal(total)
    cuts = np.cumsum(sizes)[:-1]
    blocks = [Block(xb, yb, tb) for xb, yb, tb in
              zip(np.split(x, cuts), np.split(y, cuts), np.split(t, cuts))]
    return Dataset(*blocks)


# --------------------------------------------------------------------------
# predictors

PREDICTORS = ("ols", "ridge", "knn", "oracle", "identity", "svr", "rf")


@dataclass
class Predictor:
    kind: str = "ols"
    lam: float = 1.0
    k: int = 5
    oracle: Optional[Callable] = None
    seed: int = 0
    coef: Optional[np.ndarray] = field(default=None, repr=False)
    _train: Optional[tuple] = field(default=None, repr=False)
    _model: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in PREDICTORS:
            raise ValueError(f"unknown predictor {self.kind!r}; expected one of {PREDICTORS}")

    def fit(self, x: np.ndarray, y: np.ndarray) -> "Predictor":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if len(y) == 0:
            raise ValueError("cannot fit a predictor on an empty training set")
        if self.kind == "ols":
            design = np.c_[np.ones(len(x)), x]
            if np.linalg.matrix_rank(design) < design.shape[1]:
                self.coef = _ridge(design, y, 1e-8 * max(1.0, float(np.trace(design.T @ design))))
            else:
                self.coef = np.linalg.lstsq(design, y, rcond=None)[0]
        elif self.kind == "ridge":
            self.coef = _ridge(np.c_[np.ones(len(x)), x], y, self.lam)
        elif self.kind == "knn":
            self._train = (x.copy(), y.copy())
        elif self.kind == "svr":
            from sklearn.compose import TransformedTargetRegressor
            from sklearn.pipeline import make_pipeline
            from sklearn.preprocessing import StandardScaler
            from sklearn.svm import SVR
            # features and target standardized before the RBF fit
            model = TransformedTargetRegressor(make_pipeline(StandardScaler(), SVR()),
                                               transformer=StandardScaler())
            self._model = model.fit(x, y)
        elif self.kind == "rf":
            from sklearn.ensemble import RandomForestRegressor
            self._model = RandomForestRegressor(n_estimators=100, random_state=self.seed).fit(x, y)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind in ("ols", "ridge"):
            return self.coef[0] + x @ self.coef[1:]
        if self.kind == "knn":
            xt, yt = self._train
            k = min(self.k, len(yt))
            d = ((x[:, None, :] - xt[None, :, :]) ** 2).sum(axis=2)
            nearest = np.argpartition(d, k - 1, axis=1)[:, :k]
            return yt[nearest].mean(axis=1)
        if self.kind == "oracle":
            return np.asarray(self.oracle(x), dtype=float)
        if self.kind == "identity":
            return x[:, 0].copy()
        return self._model.predict(x)


def _ridge(design, y, lam):
    penalty = lam * np.eye(design.shape[1])
    penalty[0, 0] = 0.0
    return np.linalg.solve(design.T @ design + penalty, design.T @ y)


def fit_predict(predictor: Predictor, train: Block) -> Predictor:
    return predictor.fit(train.x, train.y)


DEFAULT_PREDICTOR = {
    "A": "ols", "CompareCase1": "ols", "B": "svr", "IidB": "svr", "SlowShift": "svr",
    "ChangePoint": "svr", "ArmaSeries": "svr", "C": "rf", "CompareCase2": "identity",
}


def oracle_for(kind: str) -> Callable:
    return lambda x: conditional_mean(kind, x)


def write_block_csv(path, block: Block) -> None:
    """Write ``t, x_1..x_d, y`` rows."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *[f"x_{j + 1}" for j in range(block.x.shape[1])], "y"])
        for t, x, y in zip(block.t, block.x, block.y):
            w.writerow([int(t), *[repr(float(v)) for v in x], repr(float(y))])

