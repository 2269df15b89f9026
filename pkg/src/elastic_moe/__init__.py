"""Elastic mixture-of-experts training and analysis at desk scale.

Train a toy MoE transformer under randomized per-layer expert counts, then
serve the same checkpoint at any expert budget and measure how gracefully it
degrades — plus router diagnostics (focused rank correlation, gate-vector
similarity) that explain why variable-count training produces nested expert
rankings while fixed-count training produces brittle specialists.
"""

import os as _os

# MMOE_THREADS caps internal (BLAS) parallelism; it must take effect before
# numpy initializes its thread pools, hence before any submodule import.
_threads = _os.environ.get("MMOE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from . import analysis, checkpoint, data, evals, moe, model, optim, scheduler, tensor, trainer
from .analysis import (
    CorrelationHeatmap,
    LogitTrace,
    capture_trace,
    focused_spearman,
    heatmap,
    mods,
    mods_profile,
    spearman_rank,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SyntheticTask, generate_synthetic, split_stream
from .errors import (
    CheckpointFormatError,
    ConfigurationError,
    InfeasibleBudgetError,
    TrainingDivergedError,
)
from .evals import ActivationPattern, EvalReport, evaluate, expand_pattern, sweep
from .model import Model, ModelConfig, build_model
from .moe import (
    Expert,
    ExpertSelection,
    MoELayer,
    RouterWeights,
    balance_loss,
    moe_forward,
    router_scores,
    select_topk,
    select_topp,
)
from .optim import OptimizerConfig, Parameter, adamw_step, clip_global_norm, lr_at
from .scheduler import (
    KSchedule,
    StrategyConfig,
    enforce_budget,
    sample_uniform_k,
    sample_weighted_k,
    schedule,
)
from .seeding import stream, streams
from .tensor import Tensor, no_grad, set_debug_checks
from .trainer import StepReport, TrainConfig, TrainerState, train, train_step
