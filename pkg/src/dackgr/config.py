"""Run configuration: dataclasses that round-trip through JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

ANTICIPATION_STRATEGIES = ("sample", "top-one", "average", "off")
BASELINES = ("none", "moving-average")

# hyperparameter grids for completion (alpha, M, k)
ALPHA_GRID = (0.5, 0.33, 0.25, 0.2)
MAX_ACTIONS_GRID = (10, 20, 40, 60)
TOP_K_GRID = (1, 2, 3, 5)


@dataclass
class AnticipationConfig:
    strategy: str = "sample"

    def __post_init__(self):
        if self.strategy == "top":
            self.strategy = "top-one"
        if self.strategy == "avg":
            self.strategy = "average"
        if self.strategy not in ANTICIPATION_STRATEGIES:
            raise ValueError(f"anticipation strategy must be one of {ANTICIPATION_STRATEGIES}, got {self.strategy!r}")

    @property
    def enabled(self) -> bool:
        return self.strategy != "off"


@dataclass
class CompletionConfig:
    alpha: float = 0.33
    max_actions: int = 20
    k: int = 2

    def __post_init__(self):
        if not (self.alpha == 0 or 0 < self.alpha <= 1):
            raise ValueError(f"completion alpha must be 0 (off) or in (0, 1], got {self.alpha}")
        if self.max_actions < 1 or self.k < 1:
            raise ValueError("completion max_actions and k must be >= 1")

    @property
    def enabled(self) -> bool:
        return self.alpha > 0


@dataclass
class PolicyConfig:
    dim: int = 200
    hidden: int = 200
    layers: int = 3
    mlp_hidden: int = 200
    action_dropout: float = 0.0
    # push reward into the relation-attention MLP through log w_r of chosen completion actions
    attention_surrogate: bool = True
    dtype: str = "float32"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    horizon: int = 3
    rollouts: int = 20
    entropy_weight: float = 0.01
    entropy_decay: bool = True
    baseline: str = "moving-average"
    baseline_decay: float = 0.95
    reward_shaping: bool = True
    mask_gold_edge: bool = True
    inverse_queries: bool = False
    eval_every: int = 1
    beam_width: int = 32
    seed: int = 0
    anticipation: AnticipationConfig = field(default_factory=AnticipationConfig)
    completion: CompletionConfig = field(default_factory=CompletionConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        if isinstance(self.anticipation, dict):
            self.anticipation = AnticipationConfig(**self.anticipation)
        if isinstance(self.completion, dict):
            self.completion = CompletionConfig(**self.completion)
        if isinstance(self.policy, dict):
            self.policy = PolicyConfig(**self.policy)
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        for name in ("epochs", "batch_size", "horizon", "beam_width", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.rollouts < 0 or self.lr <= 0 or self.entropy_weight < 0:
            raise ValueError("rollouts >= 0, lr > 0 and entropy_weight >= 0 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def merge(base: dict, overrides: dict) -> dict:
    """Recursive dict merge; ``None`` values in ``overrides`` are ignored."""
    out = dict(base)
    for k, v in overrides.items():
        if v is None:
            continue
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        elif is_dataclass(v):
            out[k] = asdict(v)
        else:
            out[k] = v
    return out
