"""Router diagnostics.

Two lenses on whether routing is nested and specialized:

* rank consistency — Spearman correlation of router logits between a
  high-budget and a low-budget inference run, restricted per token to the
  union of experts either run selected ("focused" correlation);
* gate geometry — mean absolute off-diagonal cosine similarity between
  L2-normalized expert gating vectors, lower meaning more specialized experts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .model import Model
from .trainer import cut_samples


@dataclass
class LogitTrace:
    """Raw router logits from one instrumented inference run.

    logits[layer, token] is the length-N pre-score-fn logit vector; the
    schedule the run used is kept for bookkeeping.
    """

    logits: np.ndarray  # [num_layers, num_tokens, num_experts]
    per_layer_k: list[int]

    @property
    def num_layers(self) -> int:
        return self.logits.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.logits.shape[1]


@dataclass
class CorrelationHeatmap:
    """Mean focused correlation per (layer, small budget)."""

    matrix: np.ndarray        # [num_layers, len(k_smalls)]
    k_smalls: list[int]
    k_large: int
    tokens: int
    undefined_counts: np.ndarray  # same shape as matrix; tokens dropped per cell


def capture_trace(
    model: Model,
    eval_tokens: np.ndarray,
    per_layer_k: Sequence[int],
    seq_len: int,
    batch_size: int = 32,
) -> LogitTrace:
    """Record every MoE layer's raw router logits while evaluating the token
    stream under the given schedule. Two runs over the same stream yield
    token-aligned traces."""
    per_layer_k = [int(k) for k in per_layer_k]
    samples = cut_samples(np.asarray(eval_tokens), seq_len)
    collected: list[list[np.ndarray]] = [[] for _ in model.blocks]
    with T.no_grad():
        for start in range(0, samples.shape[0], batch_size):
            chunk = samples[start : start + batch_size]
            sink: list[np.ndarray] = []
            model.forward(chunk[:, :-1], per_layer_k=per_layer_k, trace=sink)
            for li, arr in enumerate(sink):
                collected[li].append(arr)
    logits = np.stack([np.concatenate(layer_chunks, axis=0) for layer_chunks in collected])
    return LogitTrace(logits=logits, per_layer_k=per_layer_k)


# ---------------------------------------------------------------------------
# rank correlation
# ---------------------------------------------------------------------------

def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties averaged."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rank(a, b) -> Optional[float]:
    """Spearman rho with average ranks for ties; None when undefined
    (length < 2 or a constant input)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ConfigurationError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        return None
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    if denom == 0.0:
        return None
    return float(np.sum(ra * rb) / denom)


def _top_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties to the lower index."""
    return np.argsort(-logits, kind="stable")[:k]


def focused_spearman(
    logits_large: np.ndarray,
    logits_small: np.ndarray,
    k_large: int,
    k_small: int,
) -> Optional[float]:
    """Rank correlation restricted to the union of each run's own top set."""
    logits_large = np.asarray(logits_large).reshape(-1)
    logits_small = np.asarray(logits_small).reshape(-1)
    n = logits_large.size
    if logits_small.size != n:
        raise ConfigurationError("logit vectors must have equal length")
    # each budget applies to its own vector, so exchanging the (vector, k)
    # pairs is legal and leaves the union unchanged
    if not (1 <= k_large <= n and 1 <= k_small <= n):
        raise ConfigurationError(
            f"budgets must lie in [1, {n}], got ({k_large}, {k_small})"
        )
    relevant = sorted(
        set(_top_indices(logits_large, k_large).tolist())
        | set(_top_indices(logits_small, k_small).tolist())
    )
    return spearman_rank(logits_large[relevant], logits_small[relevant])


def heatmap(
    trace_large: LogitTrace,
    traces_small: dict[int, LogitTrace],
    k_large: int,
) -> CorrelationHeatmap:
    """Mean focused correlation per layer for each small budget's trace;
    undefined tokens are dropped from the mean and counted."""
    num_layers = trace_large.num_layers
    num_tokens = trace_large.num_tokens
    k_smalls = sorted(traces_small)
    matrix = np.zeros((num_layers, len(k_smalls)))
    undefined = np.zeros((num_layers, len(k_smalls)), dtype=np.int64)
    for ci, k_small in enumerate(k_smalls):
        small = traces_small[k_small]
        if small.num_tokens != num_tokens or small.num_layers != num_layers:
            raise ConfigurationError(
                f"trace for k_small={k_small} misaligned: "
                f"{small.logits.shape} vs {trace_large.logits.shape}"
            )
        for li in range(num_layers):
            vals = []
            for t in range(num_tokens):
                rho = focused_spearman(
                    trace_large.logits[li, t], small.logits[li, t], k_large, k_small
                )
                if rho is None:
                    undefined[li, ci] += 1
                else:
                    vals.append(rho)
            matrix[li, ci] = float(np.mean(vals)) if vals else np.nan
    return CorrelationHeatmap(
        matrix=matrix,
        k_smalls=k_smalls,
        k_large=k_large,
        tokens=num_tokens,
        undefined_counts=undefined,
    )


def write_heatmap_csv(hm: CorrelationHeatmap, path) -> None:
    """Rows = layers, columns = k_small values, 6 decimal places."""
    with open(path, "w", newline="") as f:
        f.write("layer," + ",".join(f"k_small={k}" for k in hm.k_smalls) + "\n")
        for li in range(hm.matrix.shape[0]):
            cells = ",".join(f"{v:.6f}" for v in hm.matrix[li])
            f.write(f"{li},{cells}\n")


# ---------------------------------------------------------------------------
# gate-vector geometry
# ---------------------------------------------------------------------------

def mods(gate_weights: np.ndarray) -> float:
    """Mean absolute off-diagonal cosine similarity of row vectors.

    gate_weights: [num_experts, d]; rows are L2-normalized first, so the
    result lies in [0, 1] — 0 for mutually orthogonal experts, 1 for
    identical directions.
    """
    w = np.asarray(gate_weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 2:
        raise ConfigurationError(f"need a [num_experts >= 2, d] matrix, got {w.shape}")
    norms = np.linalg.norm(w, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise ConfigurationError(f"expert {int(zero[0])} has a zero gating vector")
    unit = w / norms[:, None]
    sim = unit @ unit.T
    n = w.shape[0]
    off = np.abs(sim) * (1.0 - np.eye(n))
    return float(off.sum() / (n * (n - 1)))


def mods_profile(model: Model) -> list[float]:
    """Per-layer MODS of the router gating vectors (experts as rows)."""
    return [mods(layer.router.Wg.value.data.T) for layer in model.moe_layers]


def write_mods_csv(values: Sequence[float], path) -> None:
    with open(path, "w", newline="") as f:
        f.write("layer,mods\n")
        for li, v in enumerate(values):
            f.write(f"{li},{v:.6f}\n")
