"""Missing-aware multivariate forecasting with structured state-space models
and a prototype memory bank, on a small numpy autodiff engine."""

from .autodiff import Tape, Tensor, no_grad
from .data import TimeSeriesFrame, inject_missing, load_csv, save_csv, synth_generate
from .train import METHODS, TrainConfig, compare, run_method, train

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "no_grad", "TimeSeriesFrame", "inject_missing", "load_csv", "save_csv",
           "synth_generate", "METHODS", "TrainConfig", "compare", "run_method", "train"]
