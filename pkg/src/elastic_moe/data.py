"""Deterministic synthetic token streams for training and evaluation.

Three task families:

* ``modular_arithmetic`` — fixed-format equations ``a op b = c ;`` with the
  result reduced modulo a small prime-ish base; the result token is fully
  determined by the prefix, so loss above the random-operand entropy floor
  measures genuine computation.
* ``token_copy`` — random spans repeated verbatim after a delimiter; tests
  in-context recall.
* ``char_lm_from_file`` — character-level stream sampled as random windows of
  a plain-text file.

Streams are pure functions of (task, rng); train and eval splits use disjoint
seed sub-streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError

TASK_KINDS = ("modular_arithmetic", "token_copy", "char_lm_from_file")

MOD_OPS = ("+", "-", "*")


@dataclass
class SyntheticTask:
    kind: str
    # modular_arithmetic
    modulus: int = 31
    ops: tuple[str, ...] = ("+", "-")
    # token_copy
    span_len: int = 8
    alphabet_size: int = 16
    # char_lm_from_file
    text_path: Optional[str] = None
    window: int = 256
    # split seeds
    seed_train: int = 1
    seed_eval: int = 2

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"unknown task kind {self.kind!r}")
        if self.seed_train == self.seed_eval:
            raise ConfigurationError("train and eval splits need distinct seeds")
        if self.kind == "modular_arithmetic":
            if self.modulus < 2:
                raise ConfigurationError(f"modulus must be >= 2, got {self.modulus}")
            if not self.ops or any(op not in MOD_OPS for op in self.ops):
                raise ConfigurationError(f"ops must be drawn from {MOD_OPS}, got {self.ops}")
        elif self.kind == "token_copy":
            if self.span_len < 1 or self.alphabet_size < 2:
                raise ConfigurationError("token_copy needs span_len >= 1, alphabet_size >= 2")
        elif self.kind == "char_lm_from_file":
            if not self.text_path:
                raise ConfigurationError("char_lm_from_file requires text_path")

    @property
    def vocab_size(self) -> int:
        if self.kind == "modular_arithmetic":
            # digits, op symbols, '=', ';'
            return self.modulus + len(self.ops) + 2
        if self.kind == "token_copy":
            # alphabet plus delimiter
            return self.alphabet_size + 1
        return len(self._charset())

    def _charset(self) -> list[str]:
        text = Path(self.text_path).read_text(encoding="utf-8")
        return sorted(set(text))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "modulus": self.modulus,
            "ops": list(self.ops),
            "span_len": self.span_len,
            "alphabet_size": self.alphabet_size,
            "text_path": self.text_path,
            "window": self.window,
            "seed_train": self.seed_train,
            "seed_eval": self.seed_eval,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        d = dict(d)
        if "ops" in d and d["ops"] is not None:
            d["ops"] = tuple(d["ops"])
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


def _gen_modular(task: SyntheticTask, num_tokens: int, rng: np.random.Generator) -> np.ndarray:
    m = task.modulus
    op_ids = {op: m + i for i, op in enumerate(task.ops)}
    eq_id = m + len(task.ops)
    sep_id = eq_id + 1
    n_eq = num_tokens // 6 + 1
    a = rng.integers(0, m, size=n_eq)
    b = rng.integers(0, m, size=n_eq)
    which = rng.integers(0, len(task.ops), size=n_eq)
    out = np.empty((n_eq, 6), dtype=np.int64)
    out[:, 0] = a
    out[:, 1] = np.asarray([op_ids[task.ops[w]] for w in which])
    out[:, 2] = b
    out[:, 3] = eq_id
    results = np.empty(n_eq, dtype=np.int64)
    for i, op in enumerate(task.ops):
        sel = which == i
        if op == "+":
            results[sel] = (a[sel] + b[sel]) % m
        elif op == "-":
            results[sel] = (a[sel] - b[sel]) % m
        else:
            results[sel] = (a[sel] * b[sel]) % m
    out[:, 4] = results
    out[:, 5] = sep_id
    return out.reshape(-1)[:num_tokens]


def _gen_copy(task: SyntheticTask, num_tokens: int, rng: np.random.Generator) -> np.ndarray:
    s = task.span_len
    delim = task.alphabet_size
    period = 2 * s + 2
    n_spans = num_tokens // period + 1
    spans = rng.integers(0, task.alphabet_size, size=(n_spans, s))
    block = np.empty((n_spans, period), dtype=np.int64)
    block[:, :s] = spans
    block[:, s] = delim
    block[:, s + 1 : 2 * s + 1] = spans
    block[:, 2 * s + 1] = delim
    return block.reshape(-1)[:num_tokens]


def _gen_char_lm(task: SyntheticTask, num_tokens: int, rng: np.random.Generator) -> np.ndarray:
    text = Path(task.text_path).read_text(encoding="utf-8")
    charset = sorted(set(text))
    lut = {c: i for i, c in enumerate(charset)}
    ids = np.asarray([lut[c] for c in text], dtype=np.int64)
    if ids.size <= task.window:
        reps = num_tokens // ids.size + 1
        return np.tile(ids, reps)[:num_tokens]
    chunks = []
    remaining = num_tokens
    while remaining > 0:
        start = int(rng.integers(0, ids.size - task.window))
        chunks.append(ids[start : start + task.window])
        remaining -= task.window
    return np.concatenate(chunks)[:num_tokens]


def generate_synthetic(task: SyntheticTask, num_tokens: int, rng: np.random.Generator) -> np.ndarray:
    """Produce ``num_tokens`` task tokens; identical (task, rng state) gives
    an identical stream."""
    task.validate()
    if num_tokens <= 0:
        return np.zeros(0, dtype=np.int64)
    if task.kind == "modular_arithmetic":
        return _gen_modular(task, num_tokens, rng)
    if task.kind == "token_copy":
        return _gen_copy(task, num_tokens, rng)
    return _gen_char_lm(task, num_tokens, rng)


def split_stream(task: SyntheticTask, split: str, num_tokens: int) -> np.ndarray:
    """Stream for the named split, seeded by the task's split seed."""
    if split == "train":
        seed = task.seed_train
    elif split == "eval":
        seed = task.seed_eval
    else:
        raise ConfigurationError(f"unknown split {split!r}")
    return generate_synthetic(task, num_tokens, np.random.default_rng(seed))
