"""Last-mini-batch self-distillation with dynamic confidence weighting for binary segmentation."""

from .losses import (
    ConfigError,
    ContractError,
    LossBreakdown,
    bce_loss,
    confidence_coefficient,
    dcsd_loss,
    dice_loss,
    mse_consistency,
    sigmoid_with_temperature,
    total_loss,
)
from .segmodel import DCSDNet, FeaturePyramid, ModelConfig, init_parameters, load_checkpoint, save_checkpoint
from .trainer import BatchCache, IterationRecord, TrainingConfig, fit, run_epoch, train_step

__version__ = "0.1.0"
