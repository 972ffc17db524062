"""Selective conformal prediction intervals for online streams.

Calibration points are picked from the labeled history so that they stay
exchangeable with the test point given that it was selected.
"""
from .conformal import (ScoreFunction, build_interval, conformal_pvalue, conformal_quantile,
                        quantile_at_level, realized_beta)
from .core import HoldoutBuffer, HoldoutMode, PredictionInterval, SelectionTrace, StreamRecord
from .engine import (DtACIParams, DtACIState, MethodSpec, RunLog, SpendingState, StreamData,
                     cap_dtaci_step, cap_step, elond_ci_step, lord_ci_step, ocp_step, run_stream)
from .experiment import PRESETS, ConfigError, IngestError, RunConfig, ingest, run
from .metrics import ReplicationReport, RunMetrics, aggregate, fcp_update
from .pickers import IncompatibleRules, PickRule, check_compatible, pick
from .selectors import (DecisionDriven, Direction, FixedThreshold, LinearCapped, MeanStat,
                        MultipleTesting, QuantileStat, SaffronState, SelectionRule,
                        SymmetricThreshold, saffron_step)
from .simlab import Predictor, ScenarioSpec, generate

__version__ = "0.1.0"
