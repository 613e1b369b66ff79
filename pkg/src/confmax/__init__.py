"""Fully test-time adaptation by confidence maximization on a numpy autodiff core."""

from .engine import AdaptConfig, AdaptableModel, adapt, evaluate, load_checkpoint, save_checkpoint
from .layers import ToyCNN
from .losses import loss_div, loss_ent, loss_hlr, loss_pl, loss_slr
from .transform import InputTransform

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "AdaptableModel", "adapt", "evaluate", "load_checkpoint", "save_checkpoint", "ToyCNN",
    "loss_div", "loss_ent", "loss_hlr", "loss_pl", "loss_slr", "InputTransform",
]
