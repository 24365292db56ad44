"""Run configuration: JSON files mapped onto strict dataclasses.

Unknown keys anywhere in the file are rejected with their dotted path, so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .activation import PoolConfig, PoolMode
from .baselines import DEFAULT_C_GRID, DEFAULT_OFFSETS, ProbeConfig, TokenOffsetSet
from .exceptions import ConfigError
from .protocols import DEFAULT_FRACTIONS, ExperimentPlan
from .store import CorpusSpec
from .synth import DEFAULT_TOY_LLMS, PlantedTask
from .training import GRID_PRESETS, GridSpec, ModelSpec, OptimSpec


@dataclass
class LlmSpec:
    llm_id: str
    n_layers: int
    hidden_dim: int
    n_heads: int = 4
    vocab_size: int = 64
    ffn_scale: float = 8.0


@dataclass
class TaskSpec:
    """Planted task; the signal layer is given as relative depth in [0, 1]."""

    name: str
    signal_depth: float = 0.5
    signal_token_offset: int = -1
    rule: str = "linear"
    noise_scale: float = 0.5
    flip_p: float = 0.05
    min_tokens: int = 8
    max_tokens: int = 32
    direction_seed: int = 0

    def layer_for(self, n_layers: int) -> int:
        return int(round(self.signal_depth * (n_layers - 1)))

    def planted(self, n_layers: int) -> PlantedTask:
        return PlantedTask(name=self.name, signal_layer=self.layer_for(n_layers),
                           signal_token_offset=self.signal_token_offset, rule=self.rule,
                           noise_scale=self.noise_scale, flip_p=self.flip_p, min_tokens=self.min_tokens,
                           max_tokens=self.max_tokens, direction_seed=self.direction_seed)


def _default_llms():
    return [LlmSpec(n, l, d) for n, l, d in DEFAULT_TOY_LLMS]


def _default_tasks():
    return [TaskSpec("linear", 0.5, -1, "linear", flip_p=0.05),
            TaskSpec("xor", 0.5, -1, "xor", flip_p=0.0, direction_seed=1),
            TaskSpec("early", 0.0, 0, "linear", flip_p=0.1, direction_seed=2)]


@dataclass
class SplitSpec:
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    seed: int = 42


@dataclass
class SynthSection:
    n_samples: int = 500
    llms: list[LlmSpec] = field(default_factory=_default_llms)
    tasks: list[TaskSpec] = field(default_factory=_default_tasks)
    storage: str = "both"
    half: bool = True
    shard_size: int = 1000
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self):
        if self.storage not in ("pooled", "raw", "both"):
            raise ConfigError(f"synth.storage must be pooled, raw or both, got {self.storage!r}")
        if self.n_samples < 20:
            raise ConfigError("synth.n_samples must be >= 20")


@dataclass
class PoolSection:
    n_layers: int = 4
    n_tokens: int = 8
    mode: str = "two_d"

    def build(self) -> PoolConfig:
        return PoolConfig(self.n_layers, self.n_tokens, PoolMode(self.mode))


@dataclass
class ModelSection:
    kind: str = "act-vit"
    shared_dim: int = 32
    n_heads: int = 4
    readout: str = "mean"


@dataclass
class GridSection:
    preset: str | None = None
    depth: list[int] = field(default_factory=lambda: [2])
    lr: list[float] = field(default_factory=lambda: [1e-3])
    embed_dim: list[int] = field(default_factory=lambda: [64])
    epochs: list[int] = field(default_factory=lambda: [15])
    dropout: list[float] = field(default_factory=lambda: [0.1])
    weight_decay: list[float] = field(default_factory=lambda: [1e-3])
    patch_size: list[list[int]] = field(default_factory=lambda: [[1, 1]])

    def build(self) -> GridSpec:
        if self.preset is not None:
            if self.preset not in GRID_PRESETS:
                raise ConfigError(f"unknown grid preset {self.preset!r}")
            return GridSpec.preset(self.preset)
        return GridSpec(self.depth, self.lr, self.embed_dim, self.epochs, self.dropout, self.weight_decay,
                        [tuple(p) for p in self.patch_size])


@dataclass
class OptimSection:
    batch_size: int = 64
    grad_clip: float = 1.0
    class_weighting: bool = False


@dataclass
class AdaptSection:
    lr: float = 1e-2
    weight_decay: float = 1e-3
    epochs: int = 15
    batch_size: int = 64
    fraction: float = 1.0


@dataclass
class PlanSection:
    protocol: str = "single_source"
    target: list[str] | None = None
    corpus: list[dict] | None = None
    fractions: list[float] = field(default_factory=lambda: list(DEFAULT_FRACTIONS))


@dataclass
class ProbeSection:
    c_grid: list[float] = field(default_factory=lambda: list(DEFAULT_C_GRID))
    offsets: list[int] = field(default_factory=lambda: list(DEFAULT_OFFSETS))
    max_iter: int = 1000
    tol: float = 1e-6
    standardize: bool = True

    def build(self) -> tuple[ProbeConfig, TokenOffsetSet]:
        return (ProbeConfig(tuple(self.c_grid), self.max_iter, self.tol, self.standardize),
                TokenOffsetSet(tuple(self.offsets)))


@dataclass
class BenchSection:
    batch_size: int = 256
    repetitions: int = 20
    warmup: int = 3


@dataclass
class ReportSection:
    inputs: list[str] = field(default_factory=list)
    show_std: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/latest"
    reference_mode: bool = False
    data_root: str = "data"
    model_path: str | None = None
    synth: SynthSection = field(default_factory=SynthSection)
    pool: PoolSection = field(default_factory=PoolSection)
    model: ModelSection = field(default_factory=ModelSection)
    grid: GridSection = field(default_factory=GridSection)
    optim: OptimSection = field(default_factory=OptimSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    plan: PlanSection = field(default_factory=PlanSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    bench: BenchSection = field(default_factory=BenchSection)
    report: ReportSection = field(default_factory=ReportSection)

    def optim_spec(self) -> OptimSpec:
        return OptimSpec(batch_size=self.optim.batch_size, seed=self.seed, grad_clip=self.optim.grad_clip,
                         class_weighting=self.optim.class_weighting)

    def adapt_spec(self) -> OptimSpec:
        a = self.adapt
        return OptimSpec(lr=a.lr, weight_decay=a.weight_decay, epochs=a.epochs, batch_size=a.batch_size,
                         seed=self.seed, grad_clip=self.optim.grad_clip)

    def model_spec(self) -> ModelSpec:
        p = self.pool.build()
        if p.mode is PoolMode.LAYER_ONLY:
            raise ConfigError("neural detectors need a fixed pooled shape; use pool.mode two_d")
        m = self.model
        return ModelSpec(m.kind, (p.n_layers, p.n_tokens), m.shared_dim, m.n_heads, m.readout)

    def experiment_plan(self) -> ExperimentPlan:
        corpus = None
        if self.plan.corpus is not None:
            try:
                corpus = CorpusSpec(list(self.plan.corpus))
            except TypeError as exc:
                raise ConfigError(f"plan.corpus: {exc}") from None
        return ExperimentPlan(self.plan.protocol, tuple(self.plan.target) if self.plan.target else None, corpus,
                              tuple(self.plan.fractions), self.grid.build(), self.model_spec(),
                              self.optim_spec(), self.adapt_spec())

    def validate(self) -> None:
        """Build every derived object once so bad values fail before any work."""
        try:
            self.probe.build()
            self.experiment_plan()
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        if not 0.0 < self.adapt.fraction <= 1.0:
            raise ConfigError("adapt.fraction must lie in (0, 1]")
        if self.bench.repetitions < 1:
            raise ConfigError("bench.repetitions must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _from_mapping(tp, value, path)
    if origin is list and args and dataclasses.is_dataclass(args[0]):
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list")
        return [_from_mapping(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is typing.Union and type(None) in args:
        return None if value is None else _convert(next(a for a in args if a is not type(None)), value, path)
    return value


def _from_mapping(cls, payload, path: str = ""):
    if not isinstance(payload, Mapping):
        raise ConfigError(f"{path or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key '{where}{unknown[0]}'")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in payload.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(payload: Mapping) -> RunConfig:
    return _from_mapping(RunConfig, payload)


def load_config(path) -> RunConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(payload)
