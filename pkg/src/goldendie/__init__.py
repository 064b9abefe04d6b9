"""Golden-die simulation from CAD layers for wafer defect detection."""

from .errors import (ConfigError, DataError, DimensionError, EvaluationError, GoldenDieError,
                     RegionError, TrainingError)
from .palette import Palette, fit_palette, quantize, reconstruct
from .raster import DefectLabels, PatchRegion, load_dataset, split_patches, write_dataset
from .synth import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "GoldenDieError", "ConfigError", "DataError", "DimensionError", "RegionError",
    "TrainingError", "EvaluationError",
    "Palette", "fit_palette", "quantize", "reconstruct",
    "DefectLabels", "PatchRegion", "load_dataset", "write_dataset", "split_patches",
    "SynthConfig", "generate",
]
