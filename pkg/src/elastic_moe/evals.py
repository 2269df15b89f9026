"""Elastic inference evaluation: run a trained model under arbitrary
per-layer expert-count schedules and tabulate loss / perplexity / accuracy.

Activation patterns assign one expert count per sequential layer group,
mirroring deployments that give early and late layers different budgets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .model import Model
from .trainer import cut_samples


@dataclass(frozen=True)
class ActivationPattern:
    """Expert counts per sequential layer group, e.g. (3, 3, 2, 2)."""

    group_ks: tuple[int, ...]

    def __post_init__(self):
        if not self.group_ks:
            raise ConfigurationError("pattern needs at least one group")
        if any(k < 1 for k in self.group_ks):
            raise ConfigurationError(f"group expert counts must be >= 1: {self.group_ks}")

    @property
    def num_groups(self) -> int:
        return len(self.group_ks)

    def label(self) -> str:
        return "-".join(str(k) for k in self.group_ks)

    @classmethod
    def parse(cls, text: str) -> "ActivationPattern":
        try:
            ks = tuple(int(part) for part in text.split("-"))
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse pattern {text!r}") from exc
        return cls(ks)


@dataclass
class EvalReport:
    pattern: str
    avg_k: float
    loss: float
    perplexity: float
    accuracy: float
    tokens: int

    def csv_row(self) -> str:
        return (
            f"{self.pattern},{self.avg_k:.6f},{self.loss:.6f},"
            f"{self.perplexity:.6f},{self.accuracy:.6f},{self.tokens}"
        )


CSV_HEADER = "pattern,avg_k,loss,perplexity,accuracy,tokens"


def expand_pattern(pattern: ActivationPattern, num_layers: int) -> list[int]:
    """Replicate each group's count over its contiguous layer span; when the
    group count does not divide num_layers the earliest groups take the extra
    layers."""
    g = pattern.num_groups
    if g > num_layers:
        raise ConfigurationError(
            f"pattern has {g} groups but the model only has {num_layers} layers"
        )
    base, rem = divmod(num_layers, g)
    out: list[int] = []
    for i, k in enumerate(pattern.group_ks):
        out.extend([k] * (base + (1 if i < rem else 0)))
    return out


def evaluate(
    model: Model,
    per_layer_k: Sequence[int],
    eval_tokens: np.ndarray,
    seq_len: int,
    batch_size: int = 32,
    pattern_label: str | None = None,
) -> EvalReport:
    """Deterministic greedy evaluation of ``model`` under a fixed schedule.

    Losses accumulate per token in float64, so the report is independent of
    ``batch_size`` partitioning.
    """
    per_layer_k = [int(k) for k in per_layer_k]
    if len(per_layer_k) != len(model.blocks):
        raise ConfigurationError(
            f"schedule length {len(per_layer_k)} != num_layers {len(model.blocks)}"
        )
    for k in per_layer_k:
        if not 1 <= k <= model.cfg.num_experts:
            raise ConfigurationError(
                f"schedule entry {k} outside [1, {model.cfg.num_experts}]"
            )
    samples = cut_samples(np.asarray(eval_tokens), seq_len)
    total_loss = 0.0
    total_correct = 0
    total = 0
    vocab = model.cfg.vocab_size
    with T.no_grad():
        for start in range(0, samples.shape[0], batch_size):
            chunk = samples[start : start + batch_size]
            inputs = chunk[:, :-1]
            targets = chunk[:, 1:].reshape(-1)
            logits, _ = model.forward(inputs, per_layer_k=per_layer_k)
            flat = logits.data.reshape(-1, vocab)
            shifted = flat - flat.max(axis=1, keepdims=True)
            lse = np.log(np.sum(np.exp(shifted), axis=1, dtype=np.float64))
            rows = np.arange(flat.shape[0])
            total_loss += float(np.sum(lse - shifted[rows, targets].astype(np.float64)))
            total_correct += int(np.sum(flat.argmax(axis=1) == targets))
            total += flat.shape[0]
    mean_loss = total_loss / max(total, 1)
    label = pattern_label if pattern_label is not None else "-".join(str(k) for k in per_layer_k)
    return EvalReport(
        pattern=label,
        avg_k=float(np.mean(per_layer_k)),
        loss=mean_loss,
        perplexity=float(np.exp(mean_loss)),
        accuracy=total_correct / max(total, 1),
        tokens=total,
    )


def sweep(
    model: Model,
    patterns: Iterable[ActivationPattern],
    eval_tokens: np.ndarray,
    seq_len: int,
    batch_size: int = 32,
) -> list[EvalReport]:
    """One EvalReport per activation pattern over the same token stream."""
    reports = []
    for pat in patterns:
        per_layer = expand_pattern(pat, len(model.blocks))
        reports.append(
            evaluate(
                model,
                per_layer,
                eval_tokens,
                seq_len,
                batch_size=batch_size,
                pattern_label=pat.label(),
            )
        )
    return reports


def flat_sweep_patterns(k_values: Iterable[int]) -> list[ActivationPattern]:
    """Single-group patterns for a plain k sweep (one row per k)."""
    return [ActivationPattern((int(k),)) for k in k_values]


def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as f:
        f.write(CSV_HEADER + "\n")
        for r in reports:
            f.write(r.csv_row() + "\n")
