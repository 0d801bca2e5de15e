"""Model hyperparameters."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Any

from ..errors import ConfigError

VARIANTS = ("full", "no_session", "no_forgetting", "backbone")
NORM_SCHEMES = ("alg", "post_ln")
LAG_NORMALIZATIONS = ("window", "causal")


@dataclass(frozen=True)
class ModelConfig:
    """Width, depth and injection settings.

    ``norm_scheme="alg"`` normalises the block input before attention and
    again after the FFN residual; ``"post_ln"`` is the textbook post-norm
    block.  ``lag_normalization="window"`` scales lags by the whole window
    span, ``"causal"`` by the span up to each query.
    """

    n_exercises: int = 100
    d: int = 128
    n_layers: int = 2
    n_heads: int = 8
    d_ff: int | None = None
    n_session_embeddings: int = 512
    max_len: int = 200
    beta: float = 0.1
    multi_rate: bool = False
    dropout: float = 0.4
    variant: str = "full"
    norm_scheme: str = "alg"
    lag_normalization: str = "window"
    pred_hidden: int | None = None
    init_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.norm_scheme not in NORM_SCHEMES:
            raise ConfigError(f"unknown norm_scheme {self.norm_scheme!r}")
        if self.lag_normalization not in LAG_NORMALIZATIONS:
            raise ConfigError(f"unknown lag_normalization {self.lag_normalization!r}")
        for name in ("n_exercises", "d", "n_layers", "n_heads", "n_session_embeddings", "max_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.d_ff is not None and self.d_ff <= 0:
            raise ConfigError("d_ff must be positive")
        if self.pred_hidden is not None and self.pred_hidden <= 0:
            raise ConfigError("pred_hidden must be positive")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype}")

    @property
    def d_k(self) -> int:
        return self.d // self.n_heads

    @property
    def ffn_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d

    @property
    def head_width(self) -> int:
        return self.pred_hidden if self.pred_hidden is not None else max(self.d // 2, 1)

    @property
    def uses_sessions(self) -> bool:
        return self.variant in ("full", "no_forgetting")

    @property
    def uses_forgetting(self) -> bool:
        return self.variant in ("full", "no_session")

    @property
    def effective_beta(self) -> float:
        return self.beta if self.uses_forgetting else 0.0

    @property
    def learnable_rates(self) -> bool:
        return self.multi_rate and self.uses_forgetting

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
