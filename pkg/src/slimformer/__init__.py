"""Joint static structured pruning and dynamic token downsampling for small
transformer encoders, trained with an information-bottleneck style objective,
plus analytical FLOPs accounting and an experiment pipeline."""

from .autodiff import Tape, Tensor, backward
from .encoder import Encoder, ModelConfig, StructuredMasks, finalize_prune
from .flops import FlopsReport, ModelCost, PaddingStrategy, model_flops
from .losses import LossBreakdown, LossWeights, entropy_loss, ib_total, norm_loss, skim_loss
from .pipeline import RunConfig, evaluate, finetune_teacher, stage1_train, stage2_train, sweep
from .sparsity import GateSet, LagrangianState, expected_sparsity
from .tokens import GumbelConfig, SamplerStack, gumbel_sample, to_attention_mask

__all__ = [
    "Encoder",
    "FlopsReport",
    "GateSet",
    "GumbelConfig",
    "LagrangianState",
    "LossBreakdown",
    "LossWeights",
    "ModelConfig",
    "ModelCost",
    "PaddingStrategy",
    "RunConfig",
    "SamplerStack",
    "StructuredMasks",
    "Tape",
    "Tensor",
    "backward",
    "entropy_loss",
    "evaluate",
    "expected_sparsity",
    "finalize_prune",
    "finetune_teacher",
    "gumbel_sample",
    "ib_total",
    "model_flops",
    "norm_loss",
    "skim_loss",
    "stage1_train",
    "stage2_train",
    "sweep",
    "to_attention_mask",
]
__version__ = "0.1.0"
