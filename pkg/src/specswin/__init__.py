"""Spectrogram-series and spectrum-occupancy forecasting with 3D
shifted-window attention on a small numpy autodiff core."""

from .errors import (CheckpointError, ConfigError, DataError, GraphError,
                     NumericError, ShapeError, SpecswinError)
from .ingest import DatasetManifest, IQRecord, StftConfig, synth_dataset
from .models import (ModelConfig, OccupancyPredictor, SpectrogramPredictor,
                     load_checkpoint, micro_config, save_checkpoint)
from .occupancy import SorLabelConfig, label_clip
from .tensor import Tensor
from .training import TrainConfig, mmd, train_sor, train_stb, transfer_finetune

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "GraphError",
    "NumericError", "ShapeError", "SpecswinError",
    "DatasetManifest", "IQRecord", "StftConfig", "synth_dataset",
    "ModelConfig", "OccupancyPredictor", "SpectrogramPredictor",
    "load_checkpoint", "micro_config", "save_checkpoint",
    "SorLabelConfig", "label_clip",
    "Tensor",
    "TrainConfig", "mmd", "train_sor", "train_stb", "transfer_finetune",
    "__version__",
]
