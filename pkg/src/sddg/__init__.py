"""Single-domain dynamic generalization for presentation attack detection."""
from .dynamic import DynamicBlock, dynamic_forward
from .losses import cross_entropy, diversity_loss, entropy_loss, im_loss
from .meta import MetaConfig, MetaTrainer, train_loop
from .model import BackboneConfig, ParamPartition, SDDGNet, build_model

__all__ = [
    "BackboneConfig", "DynamicBlock", "MetaConfig", "MetaTrainer", "ParamPartition", "SDDGNet",
    "build_model", "cross_entropy", "diversity_loss", "dynamic_forward", "entropy_loss", "im_loss", "train_loop",
]
