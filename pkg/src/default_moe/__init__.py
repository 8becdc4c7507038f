"""Mixture-of-Experts language models with default-vector routing.

A small numpy autodiff engine, an MoE layer whose router can see every
expert (selected experts contribute their outputs, the rest contribute an
EMA "default vector"), a byte-level training harness, router-gradient
analysis and a CLI that emits CSV/JSON artifacts.
"""

from .autodiff import GraphError, NumericError, ShapeError, Tensor, no_grad
from .config import ConfigError, ExperimentConfig, ModelConfig, MoeLayerConfig, TrainConfig
from .moe import DefaultVectorBank, MoELayer, RoutingOutcome, aux_load_balance_loss, combine_experts, ema_update
from .model import MoETransformerLM
from .data import Corpus, CorpusError, load_corpus, sample_batch
from .training import Trainer, TrainingDiverged, compare_runs, throughput_bench
from .gradients import gradcheck_model, grad_report, router_gradient_error
from .analysis import analyze_model, default_vector_similarity, expert_coactivation, router_entropy, routing_frequency
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .estimator import MoELanguageModel

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Corpus", "CorpusError", "CheckpointError", "DefaultVectorBank", "ExperimentConfig",
    "GraphError", "ModelConfig", "MoELanguageModel", "MoELayer", "MoETransformerLM", "MoeLayerConfig",
    "NumericError", "RoutingOutcome", "ShapeError", "Tensor", "TrainConfig", "Trainer", "TrainingDiverged",
    "analyze_model", "aux_load_balance_loss", "combine_experts", "compare_runs", "default_vector_similarity",
    "ema_update", "expert_coactivation", "grad_report", "gradcheck_model", "load_checkpoint", "load_corpus",
    "no_grad", "router_entropy", "router_gradient_error", "routing_frequency", "sample_batch",
    "save_checkpoint", "throughput_bench",
]
