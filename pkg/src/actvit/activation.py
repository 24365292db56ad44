"""Activation tensors, the LLM descriptor table and shape-normalizing max pooling."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .exceptions import InvalidActivationError, UnregisteredLLMError

# Effectively -inf for float32 inputs; never wins a max against a real activation.
PAD_VALUE = -3.0e38


class PaddingWarning(UserWarning):
    """Some pooled cells cover padding only and carry the pad value."""


@dataclass(frozen=True)
class LlmDescriptor:
    llm_id: str
    n_layers: int
    hidden_dim: int

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden_dim < 1:
            raise ValueError(f"LLM {self.llm_id!r} needs n_layers >= 1 and hidden_dim >= 1")


class LlmRegistry(Mapping[str, LlmDescriptor]):
    """Table of known source models, keyed by ``llm_id``."""

    def __init__(self, descriptors: Iterable[LlmDescriptor] = ()):
        self._table: dict[str, LlmDescriptor] = {}
        for d in descriptors:
            self.register(d)

    def register(self, descriptor: LlmDescriptor) -> None:
        known = self._table.get(descriptor.llm_id)
        if known is not None and known != descriptor:
            raise ValueError(f"LLM {descriptor.llm_id!r} already registered as {known}")
        self._table[descriptor.llm_id] = descriptor

    def __getitem__(self, llm_id: str) -> LlmDescriptor:
        try:
            return self._table[llm_id]
        except KeyError:
            raise UnregisteredLLMError(llm_id) from None

    def __iter__(self):
        return iter(self._table)

    def __len__(self):
        return len(self._table)

    def to_dict(self) -> dict:
        return {k: {"n_layers": d.n_layers, "hidden_dim": d.hidden_dim} for k, d in self._table.items()}

    @classmethod
    def from_dict(cls, payload: Mapping) -> "LlmRegistry":
        return cls(LlmDescriptor(k, int(v["n_layers"]), int(v["hidden_dim"])) for k, v in payload.items())


@dataclass
class ActivationTensor:
    """Hidden states of one response, shape ``(layers, tokens, features)``.

    ``label`` is 1 for a correct response and 0 for a hallucination.
    16-bit input is upcast to float32.
    """

    data: np.ndarray
    llm_id: str
    sample_id: str = ""
    label: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)
        if self.data.ndim != 3:
            raise InvalidActivationError("shape", f"expected a 3-d tensor, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise InvalidActivationError("shape", f"empty dimension in shape {self.data.shape}")
        if self.label is not None:
            self.label = int(self.label)
            if self.label not in (0, 1):
                raise InvalidActivationError("label", f"label must be 0 or 1, got {self.label}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_layers(self) -> int:
        return self.data.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.data.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.data.shape[2]


class PoolMode(str, enum.Enum):
    TWO_D = "two_d"
    LAYER_ONLY = "layer_only"


@dataclass(frozen=True)
class PoolConfig:
    n_layers: int = 8
    n_tokens: int = 100
    mode: PoolMode = PoolMode.TWO_D
    pad_value: float = PAD_VALUE

    def __post_init__(self):
        object.__setattr__(self, "mode", PoolMode(self.mode))
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.mode is PoolMode.TWO_D and self.n_tokens < 1:
            raise ValueError("n_tokens must be >= 1 for 2-d pooling")

    def target_shape(self, n_tokens_in: int) -> tuple[int, int]:
        if self.mode is PoolMode.LAYER_ONLY:
            return self.n_layers, n_tokens_in
        return self.n_layers, self.n_tokens

    def to_dict(self) -> dict:
        return {"n_layers": self.n_layers, "n_tokens": self.n_tokens, "mode": self.mode.value,
                "pad_value": self.pad_value}

    @classmethod
    def from_dict(cls, payload: Mapping) -> "PoolConfig":
        return cls(**dict(payload))


@dataclass
class PooledTensor:
    data: np.ndarray
    source_shape: tuple[int, int]
    config: PoolConfig
    llm_id: str
    sample_id: str = ""
    label: int | None = None

    @property
    def hidden_dim(self) -> int:
        return self.data.shape[2]


@dataclass
class _PoolPlan:
    pad_layers: int
    pad_tokens: int
    f_layers: int
    f_tokens: int
    pad_only: bool = field(default=False)


def _plan(n_layers: int, n_tokens: int, out_layers: int, out_tokens: int) -> _PoolPlan:
    padded_l = math.ceil(n_layers / out_layers) * out_layers
    padded_n = math.ceil(n_tokens / out_tokens) * out_tokens
    f_l, f_n = padded_l // out_layers, padded_n // out_tokens
    pad_only = (padded_l - n_layers) >= f_l or (padded_n - n_tokens) >= f_n
    return _PoolPlan(padded_l - n_layers, padded_n - n_tokens, f_l, f_n, pad_only)


def pool_array(data: np.ndarray, config: PoolConfig) -> np.ndarray:
    """Max-pool the two leading axes of ``data`` to ``config``'s target shape.

    Each spatial axis is padded at its end with ``config.pad_value`` up to the
    next multiple of the target size, then reduced by a max over disjoint
    ``(f_L, f_N)`` windows, independently per feature channel.
    """
    data = np.asarray(data, dtype=np.float32)
    if not np.isfinite(data).all():
        raise InvalidActivationError("non-finite", "activation tensor contains NaN or Inf")
    n_layers, n_tokens, dim = data.shape
    out_l, out_n = config.target_shape(n_tokens)
    plan = _plan(n_layers, n_tokens, out_l, out_n)
    if plan.pad_only:
        warnings.warn(
            f"pooling ({n_layers}, {n_tokens}) to ({out_l}, {out_n}) leaves cells covering padding only",
            PaddingWarning,
            stacklevel=3,
        )
    if plan.pad_layers or plan.pad_tokens:
        data = np.pad(
            data,
            ((0, plan.pad_layers), (0, plan.pad_tokens), (0, 0)),
            constant_values=np.float32(config.pad_value),
        )
    blocks = data.reshape(out_l, plan.f_layers, out_n, plan.f_tokens, dim)
    return blocks.max(axis=(1, 3))


def pool(a: ActivationTensor, config: PoolConfig) -> PooledTensor:
    """Pool an activation tensor to a fixed spatial shape."""
    return PooledTensor(
        data=pool_array(a.data, config),
        source_shape=(a.n_layers, a.n_tokens),
        config=config,
        llm_id=a.llm_id,
        sample_id=a.sample_id,
        label=a.label,
    )


def validate(a: ActivationTensor, registry: LlmRegistry) -> None:
    """Raise :class:`InvalidActivationError` naming the first violated invariant."""
    if a.llm_id not in registry:
        raise InvalidActivationError("llm", f"unknown llm_id {a.llm_id!r}")
    desc = registry[a.llm_id]
    if a.n_layers != desc.n_layers or a.hidden_dim != desc.hidden_dim:
        raise InvalidActivationError(
            "shape",
            f"{a.llm_id} expects (L={desc.n_layers}, D={desc.hidden_dim}), "
            f"got (L={a.n_layers}, D={a.hidden_dim})",
        )
    if not np.isfinite(a.data).all():
        raise InvalidActivationError("non-finite", f"sample {a.sample_id!r} contains NaN or Inf")
