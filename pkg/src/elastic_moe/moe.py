"""Sparse mixture-of-experts feed-forward sublayer.

A linear router scores every expert per token; a selection rule (top-k with a
fixed count, or a cumulative-probability threshold) picks a sparse subset; the
layer output is the score-renormalized weighted sum of the selected experts'
outputs. Unselected experts do no work: tokens are grouped per expert and
dispatched as gather / dense FFN / scatter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .optim import Parameter
from .tensor import Tensor

SCORE_FNS = ("softmax", "sigmoid")
EXPERT_ACTIVATIONS = ("gelu", "silu_glu")


@dataclass
class ExpertSelection:
    """Per-token expert choices and renormalized mixture weights.

    Stored densely for vectorized dispatch: ``order`` ranks all experts per
    token by descending score (ties to the lower expert id), ``counts`` says
    how many of those are selected, and ``weight_matrix`` holds renormalized
    weights (zero for unselected experts).
    """

    num_experts: int
    order: np.ndarray          # [T, N] int, experts by descending score
    counts: np.ndarray         # [T] int, selected count per token
    weight_matrix: np.ndarray  # [T, N] float, renormalized, 0 off-selection

    @property
    def num_tokens(self) -> int:
        return self.order.shape[0]

    @cached_property
    def mask(self) -> np.ndarray:
        """[T, N] bool — True where an expert is selected for a token."""
        m = np.zeros(self.order.shape, dtype=bool)
        ranks = np.arange(self.num_experts)[None, :] < self.counts[:, None]
        np.put_along_axis(m, self.order, ranks, axis=1)
        return m

    @property
    def indices(self) -> list[np.ndarray]:
        """Per-token selected expert ids, sorted by descending score."""
        return [self.order[t, : self.counts[t]] for t in range(self.num_tokens)]

    @property
    def weights(self) -> list[np.ndarray]:
        """Per-token renormalized weights aligned with ``indices``."""
        return [
            self.weight_matrix[t, self.order[t, : self.counts[t]]]
            for t in range(self.num_tokens)
        ]

    def tokens_for_expert(self, expert: int) -> np.ndarray:
        return np.nonzero(self.mask[:, expert])[0]

    def mean_k(self) -> float:
        return float(self.counts.mean())


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # stable sort on negated scores: equal scores keep ascending expert id
    return np.argsort(-scores, axis=1, kind="stable")


def _renormalize(scores: np.ndarray, mask: np.ndarray, counts: np.ndarray) -> np.ndarray:
    masked = np.where(mask, scores, 0.0)
    denom = masked.sum(axis=1, keepdims=True)
    safe = denom > 0.0
    # all-zero selected scores can only arise from underflow; fall back to uniform
    uniform = mask / np.maximum(counts[:, None], 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(safe, masked / np.where(safe, denom, 1.0), uniform)
    return out.astype(scores.dtype, copy=False)


def select_topk(scores: np.ndarray, k: int) -> ExpertSelection:
    """Select the ``k`` highest-scoring experts per token and renormalize
    their scores to mixture weights. Ties break toward the lower expert id."""
    scores = np.atleast_2d(np.asarray(scores))
    n_tokens, n_experts = scores.shape
    if not 1 <= k <= n_experts:
        raise ConfigurationError(f"k={k} outside valid range [1, {n_experts}]")
    order = _descending_order(scores)
    counts = np.full(n_tokens, k, dtype=np.int64)
    sel = ExpertSelection(n_experts, order, counts, np.empty(0))
    mask = sel.mask
    sel.weight_matrix = _renormalize(scores, mask, counts)
    return sel


def select_topp(scores: np.ndarray, p: float) -> ExpertSelection:
    """Select the smallest prefix of score-sorted experts whose cumulative
    probability reaches ``p``; weights follow the same renormalization as
    top-k. ``scores`` must be probabilities (rows summing to 1)."""
    if not 0.0 < p <= 1.0:
        raise ConfigurationError(f"top-p threshold must lie in (0, 1], got {p}")
    scores = np.atleast_2d(np.asarray(scores))
    n_tokens, n_experts = scores.shape
    order = _descending_order(scores)
    sorted_probs = np.take_along_axis(scores, order, axis=1)
    cum = np.cumsum(sorted_probs.astype(np.float64), axis=1)
    # the full prefix sum is 1 by definition; clamp away float shortfall so
    # p=1.0 always selects all experts
    cum[:, -1] = 1.0
    counts = (cum < p).sum(axis=1) + 1
    sel = ExpertSelection(n_experts, order, counts.astype(np.int64), np.empty(0))
    mask = sel.mask
    sel.weight_matrix = _renormalize(scores, mask, counts)
    return sel


class Expert:
    """One feed-forward expert: GeLU two-matrix FFN by default, or a gated
    SiLU variant (extra gate projection) behind the ``silu_glu`` flag."""

    def __init__(self, prefix: str, d_model: int, d_ff: int, activation: str = "gelu"):
        if activation not in EXPERT_ACTIVATIONS:
            raise ConfigurationError(f"unknown expert activation {activation!r}")
        self.activation = activation
        self.w_in = Parameter(f"{prefix}.w_in", Tensor(np.zeros((d_model, d_ff))))
        self.w_out = Parameter(f"{prefix}.w_out", Tensor(np.zeros((d_ff, d_model))))
        self.w_gate = None
        if activation == "silu_glu":
            self.w_gate = Parameter(f"{prefix}.w_gate", Tensor(np.zeros((d_model, d_ff))))

    def parameters(self) -> list[Parameter]:
        ps = [self.w_in, self.w_out]
        if self.w_gate is not None:
            ps.append(self.w_gate)
        return ps

    def forward(self, x: Tensor) -> Tensor:
        if self.activation == "silu_glu":
            h = T.silu(x @ self.w_gate.value) * (x @ self.w_in.value)
        else:
            h = T.gelu(x @ self.w_in.value)
        return h @ self.w_out.value


@dataclass
class RouterWeights:
    """Linear gating projection plus the score nonlinearity applied to it."""

    Wg: Parameter
    score_fn: str = "softmax"

    def __post_init__(self):
        if self.score_fn not in SCORE_FNS:
            raise ConfigurationError(f"unknown score_fn {self.score_fn!r}")
        if self.Wg.value.shape[1] < 2:
            raise ConfigurationError("router needs at least 2 experts")


def router_scores(router: RouterWeights, x: Tensor) -> tuple[Tensor, Tensor]:
    """Compute per-expert scores for each token.

    Returns ``(scores, logits)``: the raw linear logits are kept alongside the
    squashed scores so tracing instrumentation can record them.
    """
    if x.shape[-1] != router.Wg.value.shape[0]:
        raise T.ShapeMismatchError(
            f"input width {x.shape} does not match router {router.Wg.value.shape}"
        )
    logits = x @ router.Wg.value
    if router.score_fn == "sigmoid":
        scores = T.sigmoid(logits)
    else:
        scores = T.softmax(logits, axis=-1)
    return scores, logits


def moe_forward(
    layer: "MoELayer",
    x: Tensor,
    selection: ExpertSelection,
    scores: Tensor | None = None,
) -> Tensor:
    """Weighted combination of selected expert outputs, token-sparse.

    When the score tensor that produced ``selection`` is supplied, the
    renormalized weights are rebuilt from it inside the graph so gradients
    reach the router; otherwise the selection's stored weights are constants.
    """
    n_tokens = x.shape[0]
    if selection.num_tokens != n_tokens:
        raise T.ShapeMismatchError(
            f"selection covers {selection.num_tokens} tokens, input has {n_tokens}"
        )
    mask = selection.mask
    if scores is not None:
        masked = scores * Tensor(mask.astype(scores.dtype))
        weight_matrix = masked / masked.sum(axis=1, keepdims=True)
    else:
        weight_matrix = Tensor(selection.weight_matrix.astype(x.dtype, copy=False))

    out: Tensor | None = None
    for i, expert in enumerate(layer.experts):
        idx = np.nonzero(mask[:, i])[0]
        if idx.size == 0:
            continue
        xi = T.take_rows(x, idx, unique=True)
        yi = expert.forward(xi)
        wi = T.take_pairs(weight_matrix, idx, np.full(idx.size, i))
        contrib = T.scatter_rows(yi * wi.reshape(-1, 1), idx, n_tokens)
        out = contrib if out is None else out + contrib
    if out is None:
        out = Tensor(np.zeros_like(x.data))
    return out


def balance_loss(scores: Tensor | np.ndarray, selection: ExpertSelection, coeff: float) -> Tensor:
    """Load-balancing regularizer N * sum_i f_i * P_i scaled by ``coeff``.

    f_i is the fraction of token-slots routed to expert i (a constant);
    P_i is the mean router probability of expert i (differentiable).
    """
    if coeff < 0:
        raise ConfigurationError(f"balance coefficient must be >= 0, got {coeff}")
    score_t = scores if isinstance(scores, Tensor) else Tensor(scores)
    if coeff == 0.0:
        return Tensor(np.zeros((), dtype=score_t.dtype))
    n = selection.num_experts
    slot_counts = selection.mask.sum(axis=0)
    total_slots = max(int(slot_counts.sum()), 1)
    fractions = (slot_counts / total_slots).astype(score_t.dtype)
    mean_probs = score_t.mean(axis=0)
    return (mean_probs * Tensor(fractions)).sum() * (coeff * n)


class MoELayer:
    """Router plus a bank of experts; one per transformer block."""

    def __init__(
        self,
        layer_index: int,
        d_model: int,
        d_ff: int,
        num_experts: int,
        score_fn: str = "softmax",
        activation: str = "gelu",
    ):
        if num_experts < 2:
            raise ConfigurationError(f"need at least 2 experts, got {num_experts}")
        self.layer_index = layer_index
        prefix = f"layer.{layer_index}.moe"
        self.router = RouterWeights(
            Parameter(f"{prefix}.router.Wg", Tensor(np.zeros((d_model, num_experts)))),
            score_fn,
        )
        self.experts = [
            Expert(f"{prefix}.expert.{i}", d_model, d_ff, activation)
            for i in range(num_experts)
        ]

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def parameters(self) -> list[Parameter]:
        ps = [self.router.Wg]
        for e in self.experts:
            ps.extend(e.parameters())
        return ps

    def forward(
        self,
        x: Tensor,
        k: int | None = None,
        top_p: float | None = None,
        trace_sink: list | None = None,
    ) -> tuple[Tensor, ExpertSelection, Tensor]:
        """Route ``x`` ([tokens, d_model]) through ``k`` experts per token (or
        by cumulative threshold ``top_p``). Returns (output, selection, scores).
        """
        scores, logits = router_scores(self.router, x)
        if trace_sink is not None:
            trace_sink.append(logits.data.copy())
        if top_p is not None:
            if self.router.score_fn != "softmax":
                raise ConfigurationError("top-p selection requires softmax scores")
            selection = select_topp(scores.data, top_p)
        else:
            if k is None:
                raise ConfigurationError("expert count k is required unless top_p is set")
            selection = select_topk(scores.data, k)
        out = moe_forward(self, x, selection, scores=scores)
        return out, selection, scores
