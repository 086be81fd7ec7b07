"""FGIN: hyperspectral single-image super-resolution in plain numpy."""
__version__ = "0.1.0"

from .bands import GroupSpec, make_groups, merge, split
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Cube, NormRecord, PatchSet, extract_patches, read_cube, write_cube
from .errors import ConfigError, DataError, FginError, NonFiniteError, ShapeError, StateError
from .metrics import MetricsReport, mpsnr, mssim, sam
from .model import ModelConfig, fgin_forward, init_params, param_count, predict
from .params import ParamStore, adam_step
from .train import TrainConfig, TrainLog, evaluate

__all__ = [
    "__version__", "GroupSpec", "make_groups", "merge", "split", "load_checkpoint", "save_checkpoint",
    "Cube", "NormRecord", "PatchSet", "extract_patches", "read_cube", "write_cube", "ConfigError",
    "DataError", "FginError", "NonFiniteError", "ShapeError", "StateError", "MetricsReport", "mpsnr",
    "mssim", "sam", "ModelConfig", "fgin_forward", "init_params", "param_count", "predict",
    "ParamStore", "adam_step", "TrainConfig", "TrainLog", "evaluate",
]
