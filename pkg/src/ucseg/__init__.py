"""Dual-subnet semi-supervised segmentation with evidential uncertainty fusion."""

from .backbone import SubnetConfig, build_subnet, forward_subnet
from .config import TrainConfig, load_config
from .evidential import evidential_state, uncertainty_from_logits
from .feature_bank import FeatureBank
from .trainer import evaluate, fit, train_step
from .upg import build_upg

__version__ = "0.1.0"

__all__ = ["SubnetConfig", "build_subnet", "forward_subnet", "TrainConfig", "load_config", "evidential_state",
           "uncertainty_from_logits", "FeatureBank", "evaluate", "fit", "train_step", "build_upg"]
