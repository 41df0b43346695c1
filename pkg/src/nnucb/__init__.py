"""Kernel and neural UCB contextual bandits with NTK/CNTK covariances."""
from __future__ import annotations

from .config import RunConfig, load_config
from .errors import (ArgumentError, ConfigError, DataError, DomainError, ExperimentAborted,
                     FormatError, NNUCBError, NumericalError, TraceError, TrainingDivergence)
from .experiment import run_experiment
from .gp import FeaturePosteriorState, PosteriorState
from .kernels import KernelSpec, cntk_eval, gram, ntk_eval
from .metrics import fit_growth, gamma_bound
from .policies import BetaSchedule, beta_value
from .report import StepLog, emit_csv, load_csv, verify_trace

__version__ = "0.1.0"
