"""Per-layer expert-count schedules for every training strategy.

Strategies: a fixed count (specialist baseline), cumulative-probability
selection (count decided per token at the layer), and three granularities of
randomized counts — one draw per optimizer step, one per micro-batch, or an
independent draw per layer per forward pass. Randomized draws are uniform on
[k_min, k_max] or, with a temperature ``tau``, proportional to k**(1/tau).
An optional activation budget caps the per-pass total by proportional
scale-down plus stochastic redistribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, InfeasibleBudgetError

STRATEGY_KINDS = (
    "fixed_topk",
    "top_p",
    "mmoe_global_batch",
    "mmoe_micro_batch",
    "mmoe_layer",
)
GRANULARITY_EVENTS = ("optimizer_step", "micro_batch", "forward_pass")

# sentinel entry marking "count decided per token" (top-p) in a KSchedule
TOP_P_SENTINEL = 0

# temperature at or above which weighted sampling is treated as exactly uniform
UNIFORM_TAU = 1e6


@dataclass
class StrategyConfig:
    kind: str
    k_fixed: Optional[int] = None
    p: Optional[float] = None
    k_min: Optional[int] = None
    k_max: Optional[int] = None
    tau: Optional[float] = None
    budget_avg: Optional[float] = None

    def validate(self, num_experts: Optional[int] = None) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ConfigurationError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "fixed_topk":
            if self.k_fixed is None or self.k_fixed < 1:
                raise ConfigurationError("fixed_topk requires k_fixed >= 1")
            if num_experts is not None and self.k_fixed > num_experts:
                raise ConfigurationError(
                    f"k_fixed={self.k_fixed} exceeds expert count {num_experts}"
                )
        elif self.kind == "top_p":
            if self.p is None or not 0.0 < self.p <= 1.0:
                raise ConfigurationError(f"top_p requires p in (0, 1], got {self.p}")
        else:
            if self.k_min is None or self.k_max is None:
                raise ConfigurationError(f"{self.kind} requires k_min and k_max")
            if not 1 <= self.k_min <= self.k_max:
                raise ConfigurationError(
                    f"need 1 <= k_min <= k_max, got [{self.k_min}, {self.k_max}]"
                )
            if num_experts is not None and self.k_max > num_experts:
                raise ConfigurationError(
                    f"k_max={self.k_max} exceeds expert count {num_experts}"
                )
        if self.tau is not None and self.tau <= 0.0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.budget_avg is not None:
            if self.kind != "mmoe_layer":
                raise ConfigurationError("activation budget applies only to mmoe_layer")
            if not self.k_min <= self.budget_avg <= self.k_max:
                raise ConfigurationError(
                    f"budget_avg={self.budget_avg} outside [{self.k_min}, {self.k_max}]"
                )

    @property
    def granularity_event(self) -> str:
        """The event at which this strategy's schedule is (re)sampled."""
        return {
            "fixed_topk": "optimizer_step",
            "mmoe_global_batch": "optimizer_step",
            "mmoe_micro_batch": "micro_batch",
            "mmoe_layer": "forward_pass",
            "top_p": "forward_pass",
        }[self.kind]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "k_fixed": self.k_fixed,
            "p": self.p,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "tau": self.tau,
            "budget_avg": self.budget_avg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})


@dataclass
class KSchedule:
    """Expert counts for one forward pass, one entry per MoE layer."""

    per_layer_k: list[int]
    seed_state: Optional[dict] = field(default=None, repr=False)

    @property
    def is_top_p(self) -> bool:
        return bool(self.per_layer_k) and self.per_layer_k[0] == TOP_P_SENTINEL

    def mean_k(self) -> float:
        return float(np.mean(self.per_layer_k))


def sample_uniform_k(k_min: int, k_max: int, rng: np.random.Generator) -> int:
    """One integer uniform on [k_min, k_max] inclusive."""
    if k_min > k_max:
        raise ConfigurationError(f"k_min={k_min} > k_max={k_max}")
    return int(rng.integers(k_min, k_max + 1))


def weighted_k_probs(k_min: int, k_max: int, tau: float) -> np.ndarray:
    """Normalized sampling distribution P(k) proportional to k**(1/tau)."""
    ks = np.arange(k_min, k_max + 1, dtype=np.float64)
    if tau >= UNIFORM_TAU:
        return np.full(ks.size, 1.0 / ks.size)
    w = ks ** (1.0 / tau)
    return w / w.sum()


def sample_weighted_k(k_min: int, k_max: int, tau: float, rng: np.random.Generator) -> int:
    """One integer draw from the capacity-weighted power law over [k_min, k_max]."""
    if tau <= 0.0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    probs = weighted_k_probs(k_min, k_max, tau)
    return int(rng.choice(np.arange(k_min, k_max + 1), p=probs))


def _sample_k(strategy: StrategyConfig, rng: np.random.Generator, size: int | None = None):
    if strategy.tau is not None:
        if size is None:
            return sample_weighted_k(strategy.k_min, strategy.k_max, strategy.tau, rng)
        probs = weighted_k_probs(strategy.k_min, strategy.k_max, strategy.tau)
        return rng.choice(np.arange(strategy.k_min, strategy.k_max + 1), size=size, p=probs)
    if size is None:
        return sample_uniform_k(strategy.k_min, strategy.k_max, rng)
    return rng.integers(strategy.k_min, strategy.k_max + 1, size=size)


def schedule(
    strategy: StrategyConfig,
    num_layers: int,
    granularity_event: str,
    rng: np.random.Generator,
) -> KSchedule:
    """Produce the per-layer expert counts for the given sampling event.

    fixed_topk broadcasts its constant; the batch-granularity strategies draw
    one shared value; mmoe_layer draws independently per layer (then applies
    the activation budget if configured); top_p yields a sentinel schedule
    since its counts are decided per token at selection time.
    """
    if granularity_event not in GRANULARITY_EVENTS:
        raise ConfigurationError(f"unknown granularity event {granularity_event!r}")
    if strategy.kind != "fixed_topk" and granularity_event != strategy.granularity_event:
        raise ConfigurationError(
            f"strategy {strategy.kind!r} is sampled per {strategy.granularity_event}, "
            f"not per {granularity_event}"
        )
    state = rng.bit_generator.state

    if strategy.kind == "fixed_topk":
        return KSchedule([strategy.k_fixed] * num_layers, state)
    if strategy.kind == "top_p":
        return KSchedule([TOP_P_SENTINEL] * num_layers, state)
    if strategy.kind in ("mmoe_global_batch", "mmoe_micro_batch"):
        k = _sample_k(strategy, rng)
        return KSchedule([k] * num_layers, state)

    ks = [int(v) for v in _sample_k(strategy, rng, size=num_layers)]
    sched = KSchedule(ks, state)
    if strategy.budget_avg is not None:
        sched = enforce_budget(sched, strategy.budget_avg, strategy.k_min, strategy.k_max, rng)
    return sched


def enforce_budget(
    ks: KSchedule | list[int],
    budget_avg: float,
    k_min: int,
    k_max: int,
    rng: np.random.Generator,
) -> KSchedule:
    """Cap the summed per-layer counts at B = round(budget_avg * num_layers).

    Over-budget schedules are proportionally floored toward B, clamped to
    k_min, then the remaining slots are redistributed one at a time to layers
    drawn uniformly without replacement per pass (capped at each layer's
    originally sampled count; the cap relaxes to k_max only if no layer can
    take a slot). The result sums to exactly min(S, B).
    """
    per_layer = list(ks.per_layer_k) if isinstance(ks, KSchedule) else list(ks)
    seed_state = ks.seed_state if isinstance(ks, KSchedule) else None
    num_layers = len(per_layer)
    budget = int(round(budget_avg * num_layers))
    if budget < num_layers * k_min:
        raise InfeasibleBudgetError(
            f"budget {budget} cannot cover {num_layers} layers at k_min={k_min}"
        )
    total = sum(per_layer)
    if total <= budget:
        return KSchedule(per_layer, seed_state)

    original = np.asarray(per_layer, dtype=np.int64)
    scaled = np.maximum(k_min, (original * budget) // total)
    surplus = budget - int(scaled.sum())

    # surplus slots: raise layers back toward their sampled counts
    cap = np.minimum(original, k_max)
    while surplus > 0:
        eligible = np.nonzero(scaled < cap)[0]
        if eligible.size == 0:
            cap = np.full(num_layers, k_max, dtype=np.int64)
            eligible = np.nonzero(scaled < cap)[0]
        chosen = rng.permutation(eligible)[: min(surplus, eligible.size)]
        scaled[chosen] += 1
        surplus -= chosen.size

    # proportional flooring with the k_min clamp can overshoot tight budgets;
    # walk back down, never below k_min
    while surplus < 0:
        eligible = np.nonzero(scaled > k_min)[0]
        chosen = rng.permutation(eligible)[: min(-surplus, eligible.size)]
        scaled[chosen] -= 1
        surplus += chosen.size

    return KSchedule([int(v) for v in scaled], seed_state)
