"""Parameter-efficient fine-tuning on a desk-scale decoder-only transformer."""

__version__ = "0.1.0"

from .adapters import (
    BottleneckConfig, Ia3Config, LayerMask, LoraConfig, PrefixConfig, attach_adapter,
    count_trainable, merge_lora,
)
from .model import DESK, PAPER_1B, ModelConfig, count_base_params, forward_logits, init_model
from .train import TrainConfig, perplexity, train_adapter

__all__ = [
    "BottleneckConfig", "DESK", "Ia3Config", "LayerMask", "LoraConfig", "ModelConfig",
    "PAPER_1B", "PrefixConfig", "TrainConfig", "attach_adapter", "count_base_params",
    "count_trainable", "forward_logits", "init_model", "merge_lora", "perplexity", "train_adapter",
]
