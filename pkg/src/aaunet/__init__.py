"""All-attention U-Net for intracranial hemorrhage segmentation, with a
synthetic head-phantom dataset for desk-scale training and evaluation."""

from .dataset import AugmentPolicy, DatasetManifest, augment, generate_dataset, stack_slices
from .encoder import EncoderConfig
from .losses import focal_loss, inverse_frequency_weights
from .metrics import CLASS_NAMES, DiceReport, dice_score, evaluate
from .model import AllAttentionUNet, ModelConfig, predict_mask
from .phantom import CaseRecipe, LesionClass, LesionSpec, PhantomCase, generate_phantom_case
from .train import TrainConfig, cyclic_lr, train

__version__ = "0.1.0"

__all__ = [
    "AllAttentionUNet",
    "AugmentPolicy",
    "CaseRecipe",
    "CLASS_NAMES",
    "DatasetManifest",
    "DiceReport",
    "EncoderConfig",
    "LesionClass",
    "LesionSpec",
    "ModelConfig",
    "PhantomCase",
    "TrainConfig",
    "augment",
    "cyclic_lr",
    "dice_score",
    "evaluate",
    "focal_loss",
    "generate_dataset",
    "generate_phantom_case",
    "inverse_frequency_weights",
    "predict_mask",
    "stack_slices",
    "train",
]
