"""Minimal numpy transformer core: layers, loss, optimizer, checkpoints."""

from .checkpoint import Checkpoint, CheckpointError
from .config import ModelConfig, TrainingConfig
from .gradcheck import GradCheckResult, grad_check
from .model import PMTModel, cross_entropy, forward, loss
from .optim import AdamState, NonFiniteGradientError, adam_step, lr_at

__all__ = [
    "AdamState", "Checkpoint", "CheckpointError", "GradCheckResult", "ModelConfig",
    "NonFiniteGradientError", "PMTModel", "TrainingConfig", "adam_step", "cross_entropy",
    "forward", "grad_check", "loss", "lr_at",
]
