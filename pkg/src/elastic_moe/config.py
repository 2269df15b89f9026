"""Run configuration: one JSON file describing model, training, and task,
with flat dotted-path overrides from the command line."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .data import SyntheticTask
from .errors import ConfigurationError
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    task: SyntheticTask
    output_dir: str = "runs/default"

    def validate(self) -> None:
        """Cross-field validation; called before any work or file output."""
        self.model.validate()
        self.train.validate(self.model.num_experts)
        self.task.validate()
        if self.task.vocab_size > self.model.vocab_size:
            raise ConfigurationError(
                f"task needs vocab {self.task.vocab_size}, model has {self.model.vocab_size}"
            )
        if self.train.seq_len > self.model.max_seq_len:
            raise ConfigurationError(
                f"seq_len {self.train.seq_len} exceeds max_seq_len {self.model.max_seq_len}"
            )
        if self.train.strategy.kind == "top_p" and self.model.score_fn != "softmax":
            raise ConfigurationError("top_p training requires softmax router scores")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "task": self.task.to_dict(),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            return cls(
                model=ModelConfig.from_dict(d["model"]),
                train=TrainConfig.from_dict(d["train"]),
                task=SyntheticTask.from_dict(d["task"]),
                output_dir=d.get("output_dir", "runs/default"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed run config: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare strings are allowed without quotes


def apply_overrides(config_dict: dict, overrides: list[str]) -> dict:
    """Apply ``path.to.field=value`` assignments to a nested config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form path=value")
        path, _, raw = item.partition("=")
        keys = path.strip().split(".")
        node = config_dict
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise ConfigurationError(f"override path {path!r} does not exist")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigurationError(f"override path {path!r} does not exist")
        node[keys[-1]] = _parse_value(raw.strip())
    return config_dict
