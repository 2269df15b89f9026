"""Training loop: gradient accumulation over micro-batches, per-strategy
expert-count schedules, AdamW with warmup + linear decay, global-norm clipping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import SyntheticTask, split_stream
from .errors import ConfigurationError, TrainingDivergedError
from .model import Model, ModelConfig, build_model
from .moe import balance_loss
from .optim import OptimizerConfig, adamw_step, clip_global_norm
from .scheduler import KSchedule, StrategyConfig, schedule
from .seeding import stream


@dataclass
class TrainConfig:
    strategy: StrategyConfig
    optimizer: OptimizerConfig
    tokens_total: int = 1_000_000
    micro_batch_size: int = 16
    global_batch_size: int = 64
    seq_len: int = 64
    seed: int = 0
    balance_coeff: float = 0.01

    def validate(self, num_experts: Optional[int] = None) -> None:
        self.strategy.validate(num_experts)
        self.optimizer.validate()
        if self.global_batch_size % self.micro_batch_size != 0:
            raise ConfigurationError(
                f"global_batch_size {self.global_batch_size} not divisible by "
                f"micro_batch_size {self.micro_batch_size}"
            )
        if self.seq_len < 2:
            raise ConfigurationError(f"seq_len must be >= 2, got {self.seq_len}")
        if self.balance_coeff < 0:
            raise ConfigurationError(f"balance_coeff must be >= 0, got {self.balance_coeff}")

    @property
    def tokens_per_step(self) -> int:
        return self.global_batch_size * self.seq_len

    @property
    def num_steps(self) -> int:
        return self.tokens_total // self.tokens_per_step

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["strategy"] = self.strategy.to_dict()
        d["optimizer"] = {k: getattr(self.optimizer, k) for k in OptimizerConfig.__dataclass_fields__}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["strategy"] = StrategyConfig.from_dict(d["strategy"])
        d["optimizer"] = OptimizerConfig(**d["optimizer"])
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


@dataclass
class TrainerState:
    """Optimizer/scheduler state owned by the training loop."""

    optimizer: OptimizerConfig
    rng_schedule: np.random.Generator
    step: int = 0
    balance_coeff: float = 0.01
    clip_norm: float = 1.0


@dataclass
class StepReport:
    step: int
    loss: float
    lr: float
    tokens: int
    per_layer_k: list[list[int]] = field(default_factory=list)
    mean_k: float = 0.0
    grad_norm: float = 0.0


def _micro_loss(model: Model, ids: np.ndarray, sched: KSchedule, strategy: StrategyConfig,
                balance_coeff: float, trace: Optional[list] = None):
    """Forward one micro-batch and return (total loss tensor, ce value, mean k)."""
    inputs = ids[:, :-1]
    targets = ids[:, 1:].reshape(-1)
    top_p = strategy.p if strategy.kind == "top_p" else None
    per_layer_k = None if top_p is not None else sched.per_layer_k
    logits, info = model.forward(inputs, per_layer_k=per_layer_k, top_p=top_p, trace=trace)
    flat = logits.reshape(-1, model.cfg.vocab_size)
    ce = T.cross_entropy(flat, targets)
    loss = ce
    if balance_coeff > 0.0:
        for sel, scores in zip(info.selections, info.scores):
            loss = loss + balance_loss(scores, sel, balance_coeff)
    return loss, float(ce.data), info.mean_k()


def train_step(
    model: Model,
    batch: np.ndarray,
    strategy: StrategyConfig,
    state: TrainerState,
) -> StepReport:
    """One optimizer step over ``batch`` [n_micro, micro_batch, seq_len+1].

    The expert-count schedule is refreshed at the strategy's granularity:
    once per step (fixed / global-batch), per micro-batch, or per forward
    pass with independent per-layer draws.
    """
    if batch.ndim != 3:
        raise ConfigurationError(f"batch must be [n_micro, micro_batch, seq], got {batch.shape}")
    n_micro = batch.shape[0]
    num_layers = len(model.blocks)
    model.zero_grad()

    step_sched: Optional[KSchedule] = None
    if strategy.granularity_event == "optimizer_step":
        step_sched = schedule(strategy, num_layers, "optimizer_step", state.rng_schedule)

    ce_values = []
    ks_used: list[list[int]] = []
    mean_ks = []
    for m in range(n_micro):
        if step_sched is not None:
            sched = step_sched
        else:
            sched = schedule(strategy, num_layers, strategy.granularity_event, state.rng_schedule)
        loss, ce_value, mk = _micro_loss(model, batch[m], sched, strategy, state.balance_coeff)
        if not np.isfinite(ce_value):
            raise TrainingDivergedError(
                f"non-finite loss at step {state.step + 1}, micro-batch {m}"
            )
        (loss * (1.0 / n_micro)).backward()
        ce_values.append(ce_value)
        ks_used.append(list(sched.per_layer_k))
        mean_ks.append(mk)

    params = model.parameters()
    grad_norm = clip_global_norm(params, state.clip_norm)
    state.step += 1
    lr = adamw_step(params, state.optimizer, state.step)
    tokens = int(batch.shape[0]) * int(batch.shape[1]) * (int(batch.shape[2]) - 1)
    return StepReport(
        step=state.step,
        loss=float(np.mean(ce_values)),
        lr=lr,
        tokens=tokens,
        per_layer_k=ks_used,
        mean_k=float(np.mean(mean_ks)),
        grad_norm=grad_norm,
    )


def cut_samples(tokens: np.ndarray, seq_len: int) -> np.ndarray:
    """Cut a token stream into samples of seq_len+1 tokens advancing by
    seq_len: each sample yields seq_len next-token targets while the stream is
    consumed at exactly seq_len tokens per sample."""
    n = (tokens.size - 1) // seq_len
    if n < 1:
        raise ConfigurationError(f"stream of {tokens.size} tokens too short for seq_len {seq_len}")
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
    return tokens[idx]


def train(
    model: Model,
    train_cfg: TrainConfig,
    task: SyntheticTask,
    on_step: Optional[Callable[[StepReport], None]] = None,
) -> list[StepReport]:
    """Full training run; returns the per-step reports.

    The stream is generated up front from the task's train seed; scheduling
    randomness comes from the run seed's dedicated sub-stream.
    """
    train_cfg.validate(model.cfg.num_experts)
    task.validate()
    if task.vocab_size > model.cfg.vocab_size:
        raise ConfigurationError(
            f"task vocab {task.vocab_size} exceeds model vocab {model.cfg.vocab_size}"
        )
    n_micro = train_cfg.global_batch_size // train_cfg.micro_batch_size
    num_steps = train_cfg.num_steps
    if num_steps < 1:
        raise ConfigurationError("tokens_total too small for a single optimizer step")
    stream_tokens = split_stream(
        task, "train", num_steps * train_cfg.tokens_per_step + 1
    )
    samples = cut_samples(stream_tokens, train_cfg.seq_len)
    state = TrainerState(
        optimizer=train_cfg.optimizer,
        rng_schedule=stream(train_cfg.seed, "schedule"),
        balance_coeff=train_cfg.balance_coeff,
    )
    reports = []
    gb = train_cfg.global_batch_size
    for step_idx in range(num_steps):
        batch = samples[step_idx * gb : (step_idx + 1) * gb].reshape(
            n_micro, train_cfg.micro_batch_size, train_cfg.seq_len + 1
        )
        report = train_step(model, batch, train_cfg.strategy, state)
        reports.append(report)
        if on_step is not None:
            on_step(report)
    return reports
