"""Unsupervised model-based RL: reward-free pre-training of a multi-headed
latent world model with a snapshot policy ensemble, then fine-tuning by
policy-guided MPPI planning."""

from .config import RunConfig, load_config
from .orchestrator import evaluate, finetune, pretrain

__version__ = "0.1.0"
__all__ = ["RunConfig", "load_config", "pretrain", "finetune", "evaluate"]
