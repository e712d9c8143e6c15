"""refkit: desk-scale capsule-network training and export for the engine."""

from .model import CapsNet, margin_loss
from .train import finetune_pruned, train_and_export

__all__ = ["CapsNet", "margin_loss", "train_and_export", "finetune_pruned"]
