"""Sparse autoencoders with top-AFA activation and AFA-based diagnostics."""

__version__ = "0.1.0"

from .activations import (ActivationResult, ActivationSpec, batch_topk_mask, relu_mask,
                          top_afa_mask, top_afa_oracle, topk_mask)
from .metrics import (MetricsReport, afa_interval, binary_feature_count_bound, epsilon_dict,
                      epsilon_jl, epsilon_lbo, evaluate, nmse, violin_summary, zf_export)
from .model import EmbeddingBatch, SaeParams, decode, encode, forward, init_params
from .synth import SynthSpec, gen_dataset
from .training import TrainConfig, backward, total_loss, train
