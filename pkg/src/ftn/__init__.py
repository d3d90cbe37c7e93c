"""Functional task networks: a grid of independent tiny MLPs gated by a
binary routing mask, with a block-sequential continual-learning harness."""

from .backbone import GridSpec, NeuronBank, forward, backward, init_model, train_step
from .config import ExperimentConfig, load_config, preset
from .configurer import ConfigurerSpec, Mask, configure_mask, kwta, lateral_smooth, static_mask, variant_spec
from .errors import ConfigError, DataError, FTNError, NumericalError, UsageError
from .protocol import PerfMatrix, RunRecord, compute_metrics, run_block_sequential

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConfigurerSpec", "DataError", "ExperimentConfig", "FTNError", "GridSpec", "Mask",
    "NeuronBank", "NumericalError", "PerfMatrix", "RunRecord", "UsageError", "backward", "compute_metrics",
    "configure_mask", "forward", "init_model", "kwta", "lateral_smooth", "load_config", "preset",
    "run_block_sequential", "static_mask", "train_step", "variant_spec",
]
