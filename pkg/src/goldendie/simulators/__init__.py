"""Golden-die simulators: a pattern decision tree and a numpy U-Net."""

from .tree import TreeModel, pattern_codes, predict_tree, train_tree
from .unet import CLASSIFICATION, DEFAULT_WIDTHS, REGRESSION, UNet, to_rgb
from .training import Checkpoint, TrainConfig, infer, lr_schedule, select_best, train_unet
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "CLASSIFICATION", "REGRESSION", "DEFAULT_WIDTHS", "UNet", "to_rgb",
    "TreeModel", "pattern_codes", "train_tree", "predict_tree",
    "TrainConfig", "Checkpoint", "train_unet", "infer", "lr_schedule", "select_best",
    "save_checkpoint", "load_checkpoint",
]
