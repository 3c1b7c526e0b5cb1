"""Multi-task road extraction: joint road/border prediction with latent-graph reasoning."""

__version__ = "0.1.0"

from .config import RunConfig, load_run_config, save_run_config
from .data import (DatasetSpec, RoadDataset, RoadSample, balance_weights,
                   border_pyramid, collate, extract_border, make_sample,
                   synth_tiles, write_synth_dataset)
from .errors import ConfigError, TrainingDivergedError, ValidationError
from .losses import LossReport, balanced_bce, border_consistency, total_loss
from .metrics import (MetricReport, aggregate, boundary_f, boundary_scores,
                      evaluate_masks, region_metrics)
from .model import (ModelConfig, PredictionBundle, RoadExtractor, build_model,
                    parameter_checksum)
from .training import ablate, evaluate, evaluate_model, load_checkpoint, predict_image, train

__all__ = [
    "__version__",
    "RunConfig", "load_run_config", "save_run_config",
    "DatasetSpec", "RoadDataset", "RoadSample", "balance_weights",
    "border_pyramid", "collate", "extract_border", "make_sample",
    "synth_tiles", "write_synth_dataset",
    "ConfigError", "TrainingDivergedError", "ValidationError",
    "LossReport", "balanced_bce", "border_consistency", "total_loss",
    "MetricReport", "aggregate", "boundary_f", "boundary_scores",
    "evaluate_masks", "region_metrics",
    "ModelConfig", "PredictionBundle", "RoadExtractor", "build_model",
    "parameter_checksum",
    "ablate", "evaluate", "evaluate_model", "load_checkpoint", "predict_image", "train",
]
