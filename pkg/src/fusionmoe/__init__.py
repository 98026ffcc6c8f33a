"""Interaction-routed mixture-of-experts fusion for multimodal fake-news
classification over binary embedding bundles."""

__version__ = "0.1.0"

from .config import ConfigError, TrainConfig, load_config, save_config
from .dataio import (BundleHeader, EmbeddingRecord, FormatError,
                     FormatErrorCode, InfeasibleRegimeError, SynthConfig,
                     generate_bundle, generate_synthetic,
                     natural_regime_weights, read_bundle, stack_records,
                     write_bundle)
from .interaction import (InteractionGate, InteractionLabel,
                          InteractionThresholds, balance_loss,
                          interaction_label, interaction_loss, js_divergence,
                          router_z_loss, semantic_alignment)
from .model import ForwardOutput, Model, ModelDims, UnimodalModel, build_model
from .moe import MoeBlock
from .nn import AdaptiveNorm, Linear, Mlp, Module, TransformerBlock
from .optim import AdamW
from .tensor import (NumericFault, ShapeError, Tape, Tensor, backward,
                     cross_entropy_logits, no_grad)
from .train import (Metrics, TrainingFault, TrainResult, evaluate,
                    load_checkpoint, save_checkpoint, train_model)

__all__ = [
    "AdamW", "AdaptiveNorm", "BundleHeader", "ConfigError",
    "EmbeddingRecord", "FormatError", "FormatErrorCode", "ForwardOutput",
    "InfeasibleRegimeError", "InteractionGate", "InteractionLabel",
    "InteractionThresholds", "Linear", "Metrics", "Mlp", "Model", "ModelDims",
    "MoeBlock", "Module", "NumericFault", "ShapeError", "SynthConfig", "Tape",
    "Tensor", "TrainConfig", "TrainResult", "TrainingFault",
    "TransformerBlock", "UnimodalModel", "backward", "balance_loss",
    "build_model", "cross_entropy_logits", "evaluate", "generate_bundle",
    "generate_synthetic", "interaction_label", "interaction_loss",
    "js_divergence", "load_checkpoint", "load_config",
    "natural_regime_weights", "no_grad", "read_bundle", "router_z_loss",
    "save_checkpoint", "save_config", "semantic_alignment", "stack_records",
    "train_model", "write_bundle",
]
