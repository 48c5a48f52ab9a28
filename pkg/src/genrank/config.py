"""JSON run configuration: one section per component, unknown keys rejected."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass
class DataSection:
    embeddings: str = ""
    sequences: str = ""
    codebook: str = ""
    max_history: int = 1000


@dataclass
class SynthSection:
    n_items: int = 1000
    n_users: int = 2000
    n_clusters: int = 8
    markov_self_prob: float = 0.6
    noise_sigma: float = 0.15
    seq_len: int = 40
    d: int = 16
    repeat_prob: float = 0.0


@dataclass
class TokenizerSection:
    k: int = 32
    levels: int = 3
    s4_max: int = 64


@dataclass
class ModelSection:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    context: int = 256
    dropout: float = 0.0


@dataclass
class TrainSection:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 200
    total_steps: int = 5000
    batch_size: int = 16
    grad_accum: int = 1
    beam: int = 20
    retrieval: int = 10
    window: int = 32
    rank_pos_weight: bool = False
    head_only_rank: bool = False
    log_every: int = 50


@dataclass
class EvalSection:
    split: str = "test"
    beam: int = 20
    retrieval: int = 10
    seq_len: int = 32
    batch_size: int = 16
    yhat_mode: str = "model"
    constrained: bool = True
    max_instances: int = 0  # 0 = all


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def set(self, dotted: str, value) -> None:
        section, _, key = dotted.rpartition(".")
        target = getattr(self, section) if section else self
        if key not in {f.name for f in fields(target)}:
            raise KeyError(f"unknown config key {dotted!r}")
        setattr(target, key, value)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def _fill(obj, raw: dict, where: str) -> None:
    names = {f.name: f for f in fields(obj)}
    for key, value in raw.items():
        if key not in names:
            raise KeyError(f"unknown config key {where}{key!r}")
        current = getattr(obj, key)
        if hasattr(current, "__dataclass_fields__"):
            if not isinstance(value, dict):
                raise TypeError(f"config section {where}{key!r} must be an object")
            _fill(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, type(current)(value) if current is not None else value)


def load_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig()
    if path:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise TypeError("config file must hold a JSON object")
        _fill(cfg, raw, "")
    return cfg
