"""Toy MoE transformer: embedding + blocks of (attention, sparse MoE FFN)
with pre-RMS normalization and residuals, and a linear LM head.

Every feed-forward sublayer is a routed expert bank; the per-layer expert
count is supplied at call time, which is what makes the model elastic."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .moe import MoELayer, ExpertSelection
from .optim import Parameter
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    d_ff: int = 128
    num_layers: int = 4
    num_heads: int = 4
    num_experts: int = 16
    max_seq_len: int = 64
    score_fn: str = "softmax"
    expert_activation: str = "gelu"

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigurationError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model % self.num_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by num_heads={self.num_heads}"
            )
        if self.num_experts < 2:
            raise ConfigurationError(f"num_experts must be >= 2, got {self.num_experts}")
        if min(self.d_model, self.d_ff, self.num_layers, self.max_seq_len) < 1:
            raise ConfigurationError("model dimensions must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std (matches the usual
    truncated init)."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    for _ in range(16):
        bad = np.abs(out) > bound
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -bound, bound).astype(dtype)


class AttentionBlock:
    """Standard causal multi-head self-attention."""

    def __init__(self, layer_index: int, d_model: int, num_heads: int):
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        prefix = f"layer.{layer_index}.attn"
        mk = lambda name: Parameter(name, Tensor(np.zeros((d_model, d_model))))
        self.wq = mk(f"{prefix}.wq")
        self.wk = mk(f"{prefix}.wk")
        self.wv = mk(f"{prefix}.wv")
        self.wo = mk(f"{prefix}.wo")

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]

    def forward(self, x: Tensor, batch: int, seq: int, mask: np.ndarray) -> Tensor:
        # x: [batch*seq, d_model]
        h, hd = self.num_heads, self.head_dim
        d = h * hd

        def split_heads(w: Parameter) -> Tensor:
            y = x @ w.value
            return y.reshape(batch, seq, h, hd).transpose((0, 2, 1, 3))

        q = split_heads(self.wq)
        k = split_heads(self.wk)
        v = split_heads(self.wv)
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        scores = scores + Tensor(mask)
        probs = T.softmax(scores, axis=-1)
        ctx = (probs @ v).transpose((0, 2, 1, 3)).reshape(batch * seq, d)
        return ctx @ self.wo.value


class Block:
    def __init__(self, layer_index: int, cfg: ModelConfig):
        self.attn_gain = Parameter(
            f"layer.{layer_index}.attn_norm.gain", Tensor(np.ones(cfg.d_model))
        )
        self.attn = AttentionBlock(layer_index, cfg.d_model, cfg.num_heads)
        self.moe_gain = Parameter(
            f"layer.{layer_index}.moe_norm.gain", Tensor(np.ones(cfg.d_model))
        )
        self.moe = MoELayer(
            layer_index,
            cfg.d_model,
            cfg.d_ff,
            cfg.num_experts,
            score_fn=cfg.score_fn,
            activation=cfg.expert_activation,
        )

    def parameters(self) -> list[Parameter]:
        return (
            [self.attn_gain]
            + self.attn.parameters()
            + [self.moe_gain]
            + self.moe.parameters()
        )


@dataclass
class ForwardInfo:
    """Per-forward diagnostics: routing selections and (differentiable)
    router score tensors, one entry per MoE layer."""

    selections: list[ExpertSelection]
    scores: list[Tensor]

    def mean_k(self) -> float:
        return float(np.mean([s.mean_k() for s in self.selections]))


class Model:
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        d, v = cfg.d_model, cfg.vocab_size
        self.embedding = Parameter("embedding", Tensor(np.zeros((v, d))))
        self.pos_embedding = Parameter("pos_embedding", Tensor(np.zeros((cfg.max_seq_len, d))))
        self.blocks = [Block(i, cfg) for i in range(cfg.num_layers)]
        self.final_gain = Parameter("final_norm.gain", Tensor(np.ones(d)))
        self.lm_head = Parameter("lm_head", Tensor(np.zeros((d, v))))
        self._params: dict[str, Parameter] = {}
        for p in self._ordered_params():
            if p.name in self._params:
                raise ConfigurationError(f"duplicate parameter name {p.name!r}")
            self._params[p.name] = p
        self._mask_cache: dict[int, np.ndarray] = {}

    def _ordered_params(self) -> list[Parameter]:
        ps = [self.embedding, self.pos_embedding]
        for b in self.blocks:
            ps.extend(b.parameters())
        ps.extend([self.final_gain, self.lm_head])
        return ps

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def param(self, name: str) -> Parameter:
        return self._params[name]

    def num_params(self) -> int:
        return sum(p.value.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.value.zero_grad()

    @property
    def moe_layers(self) -> list[MoELayer]:
        return [b.moe for b in self.blocks]

    @property
    def dtype(self):
        return self.embedding.value.dtype

    def _causal_mask(self, seq: int) -> np.ndarray:
        m = self._mask_cache.get(seq)
        if m is None:
            m = np.where(np.tril(np.ones((seq, seq), dtype=bool)), 0.0, -1e9)
            m = m[None, None, :, :].astype(self.dtype)
            self._mask_cache[seq] = m
        return m

    def forward(
        self,
        ids: np.ndarray,
        per_layer_k: Optional[list[int]] = None,
        top_p: Optional[float] = None,
        trace: Optional[list] = None,
    ) -> tuple[Tensor, ForwardInfo]:
        """Run token ids [batch, seq] to logits [batch, seq, vocab].

        Routing comes either from ``per_layer_k`` (one expert count per MoE
        layer) or from a per-token ``top_p`` threshold. ``trace``, when given,
        receives one raw router-logit array per layer.
        """
        ids = np.atleast_2d(np.asarray(ids))
        batch, seq = ids.shape
        if seq > self.cfg.max_seq_len:
            raise ConfigurationError(
                f"sequence length {seq} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        if top_p is None:
            if per_layer_k is None or len(per_layer_k) != len(self.blocks):
                raise ConfigurationError(
                    f"need one k per layer ({len(self.blocks)}), got {per_layer_k}"
                )
        x = T.take(self.embedding.value, ids) + T.take(
            self.pos_embedding.value, np.arange(seq)
        )
        x = x.reshape(batch * seq, self.cfg.d_model)
        mask = self._causal_mask(seq)

        selections: list[ExpertSelection] = []
        score_tensors: list[Tensor] = []
        for li, block in enumerate(self.blocks):
            h = T.rms_norm(x, block.attn_gain.value)
            x = x + block.attn.forward(h, batch, seq, mask)
            h = T.rms_norm(x, block.moe_gain.value)
            k = None if top_p is not None else int(per_layer_k[li])
            y, sel, scores = block.moe.forward(h, k=k, top_p=top_p, trace_sink=trace)
            x = x + y
            selections.append(sel)
            score_tensors.append(scores)

        x = T.rms_norm(x, self.final_gain.value)
        logits = (x @ self.lm_head.value).reshape(batch, seq, self.cfg.vocab_size)
        return logits, ForwardInfo(selections, score_tensors)


def build_model(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Model:
    """Construct and initialize a model.

    Projections get truncated-normal std 0.02; the residual-facing outputs
    (attention output projection, expert down-projections) are scaled down by
    sqrt(2 * num_layers) to keep the residual stream in range at init.
    """
    cfg.validate()
    model = Model(cfg)
    std = 0.02
    resid_std = std / np.sqrt(2.0 * cfg.num_layers)
    residual_outputs = ("attn.wo", ".w_out")
    for p in model.parameters():
        if p.name.endswith(".gain"):
            p.value.data = np.ones(p.value.shape, dtype=dtype)
        else:
            s = resid_std if any(tag in p.name for tag in residual_outputs) else std
            p.value.data = trunc_normal(rng, p.value.shape, s, dtype)
        p.adam_m = np.zeros_like(p.value.data)
        p.adam_v = np.zeros_like(p.value.data)
    model._mask_cache.clear()
    return model
