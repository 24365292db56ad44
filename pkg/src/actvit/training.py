"""Optimization loop, grid search and adapter-only transfer."""

from __future__ import annotations

import copy
import itertools
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .exceptions import NumericFailure, ProtocolViolation, UnregisteredLLMError
from .metrics import auc
from .model import ActMlpConfig, ActVitConfig, build_model, checksum, freeze, unfreeze
from .store import Corpus, CorpusSpec, PooledDataset, nested_subsample

log = logging.getLogger(__name__)

WARMUP_FRACTION = 0.10


def warmup_cosine_lr(step: int, total_steps: int, peak: float, warmup_fraction: float = WARMUP_FRACTION) -> float:
    """Linear warmup from 0 to ``peak`` over the first 10% of steps, then cosine to 0.

    Step 0 has lr 0, step ``round(0.1 * total)`` has exactly ``peak`` and the
    last step (``total - 1``) has lr 0.
    """
    if total_steps < 2:
        return 0.0
    warm = max(1, round(warmup_fraction * total_steps))
    if step < warm:
        return peak * step / warm
    span = max(1, total_steps - 1 - warm)
    progress = min(1.0, (step - warm) / span)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimSpec:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 15
    batch_size: int = 128
    seed: int = 0
    grad_clip: float = 1.0
    class_weighting: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@contextmanager
def reference_mode(enabled: bool = True):
    """Single-threaded deterministic kernels for bit-reproducible runs."""
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(det)


def _as_tensor(x: np.ndarray, like: nn.Module) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@torch.no_grad()
def predict_logits(model: nn.Module, x: np.ndarray, llm_id: str, batch_size: int = 512) -> np.ndarray:
    """Eval-mode logits for pooled inputs ``(m, L_p, N_p, D)`` from ``llm_id``."""
    was_training = model.training
    model.eval()
    out = [model(_as_tensor(x[i:i + batch_size], model), llm_id).double().numpy() for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: nn.Module, dataset: PooledDataset, split: str = "test") -> float:
    x, y = dataset.part(split)
    return auc(predict_logits(model, x, dataset.llm_id), y)


def mean_auc(model: nn.Module, datasets: Sequence[PooledDataset], split: str = "val") -> float:
    return float(np.mean([evaluate(model, d, split) for d in datasets]))


def fit_input_stats(model: nn.Module, corpus: Corpus) -> None:
    """Estimate channel stats from training splits for LLMs that have none yet."""
    std = getattr(model, "standardizer", None)
    if std is None:
        return
    for llm_id in dict.fromkeys(k[0] for k in corpus.keys):
        if llm_id not in std.fitted:
            std.fit(llm_id, np.concatenate([corpus[k].part("train")[0] for k in corpus.keys if k[0] == llm_id]))


@dataclass
class TrainResult:
    model: nn.Module
    history: list[dict]
    best_epoch: int
    best_val_auc: float


def train(
    model: nn.Module,
    corpus: Corpus,
    optim: OptimSpec,
    val_sets: Sequence[PooledDataset] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minimize BCE-with-logits over ``corpus`` with AdamW and warmup-cosine lr.

    Only parameters with ``requires_grad`` are handed to the optimizer, so
    frozen groups stay bit-identical. The returned model carries the weights
    of the epoch with the best mean validation AUC (first on ties).
    """
    missing = [k for k in corpus.keys if k[0] not in model.config.llm_dims]
    if missing:
        raise UnregisteredLLMError(missing[0][0])
    val_sets = list(val_sets) if val_sets is not None else [corpus[k] for k in corpus.keys]
    fit_input_stats(model, corpus)
    params = [p for p in model.parameters() if p.requires_grad]
    steps_per_epoch = sum(1 for _ in corpus.batches(optim.batch_size, optim.seed, 0))
    total = steps_per_epoch * optim.epochs
    opt = torch.optim.AdamW(params, lr=0.0, weight_decay=optim.weight_decay) if params else None

    pos_weight = None
    if optim.class_weighting:
        ys = np.concatenate([corpus[k].part("train")[1] for k in corpus.keys])
        pos_weight = torch.tensor((ys == 0).sum() / max(1, (ys == 1).sum()), dtype=next(model.parameters()).dtype)
    loss_fn = nn.BCEWithLogitsLoss(pos_weight=pos_weight)

    history, best_state, best_auc, best_epoch = [], None, -math.inf, -1
    step = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(optim.seed)
        for epoch in range(optim.epochs):
            model.train()
            losses, weights, lr = [], [], 0.0
            for batch in corpus.batches(optim.batch_size, optim.seed, epoch):
                lr = warmup_cosine_lr(step, total, optim.lr)
                x = _as_tensor(batch.x, model)
                y = torch.as_tensor(batch.y, dtype=x.dtype)
                loss = loss_fn(model(x, batch.llm_id), y)
                if not torch.isfinite(loss):
                    raise NumericFailure(f"non-finite loss at epoch {epoch}, step {step} ({batch.llm_id})")
                if opt is not None:
                    for g in opt.param_groups:
                        g["lr"] = lr
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    if optim.grad_clip:
                        nn.utils.clip_grad_norm_(params, optim.grad_clip)
                    opt.step()
                losses.append(loss.item())
                weights.append(len(batch.y))
                step += 1
            val = mean_auc(model, val_sets, "val")
            record = {"epoch": epoch, "train_loss": float(np.average(losses, weights=weights)),
                      "val_auc": val, "lr": lr}
            history.append(record)
            log.debug("epoch %d loss %.4f val_auc %.4f", epoch, record["train_loss"], val)
            if on_epoch:
                on_epoch(record)
            if val > best_auc:
                best_auc, best_epoch = val, epoch
                best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.trained_on = set(model.trained_on) | set(corpus.keys)
    model.eval()
    return TrainResult(model, history, best_epoch, best_auc)


# Grids mirror the published search spaces; patch sizes that do not divide
# the pooled shape are skipped at search time.
GRID_PRESETS = {
    "single_source": {"depth": [1, 3], "lr": [1e-3], "embed_dim": [128, 1024], "epochs": [15],
                      "dropout": [0.3], "weight_decay": [1.0, 1e-3], "patch_size": [(1, 1), (8, 1), (4, 2)]},
    "joint_all": {"depth": [3], "lr": [1e-3, 5e-4], "embed_dim": [128], "epochs": [5], "dropout": [0.3],
                  "weight_decay": [10.0, 1e-3], "patch_size": [(1, 1), (1, 2), (1, 4), (2, 1), (4, 1)]},
    "leave_dataset_out": {"depth": [3], "lr": [1e-3], "embed_dim": [128], "epochs": [15], "dropout": [0.3],
                          "weight_decay": [1e-3], "patch_size": [(1, 1)]},
    "leave_llm_out": {"depth": [3, 5], "lr": [1e-3], "embed_dim": [128], "epochs": [5], "dropout": [0.3],
                      "weight_decay": [1e-3], "patch_size": [(1, 1), (8, 1), (4, 2)]},
}
ADAPT_PRESETS = {
    "low_data_adapt": {"lr": 1e-3, "epochs": 5, "weight_decay": 1e-3},
    "leave_llm_out": {"lr": 1e-3, "epochs": 15, "weight_decay": [0.1, 0.01, 10.0, 20.0]},
}


@dataclass
class GridSpec:
    depth: list[int] = field(default_factory=lambda: [3])
    lr: list[float] = field(default_factory=lambda: [1e-3])
    embed_dim: list[int] = field(default_factory=lambda: [128])
    epochs: list[int] = field(default_factory=lambda: [15])
    dropout: list[float] = field(default_factory=lambda: [0.3])
    weight_decay: list[float] = field(default_factory=lambda: [1e-3])
    patch_size: list[tuple[int, int]] = field(default_factory=lambda: [(1, 1)])

    def __post_init__(self):
        self.patch_size = [tuple(p) for p in self.patch_size]
        if any(len(getattr(self, f.name)) == 0 for f in fields(self)):
            raise ValueError("every grid axis needs at least one value")

    @classmethod
    def preset(cls, name: str) -> "GridSpec":
        return cls(**copy.deepcopy(GRID_PRESETS[name]))

    def points(self) -> list[dict]:
        names = [f.name for f in fields(self)]
        return [dict(zip(names, combo)) for combo in itertools.product(*(getattr(self, n) for n in names))]

    def __len__(self):
        return math.prod(len(getattr(self, f.name)) for f in fields(self))


@dataclass
class ModelSpec:
    """Architecture settings not searched by the grid."""

    kind: str = "act-vit"
    pooled_shape: tuple[int, int] = (8, 100)
    shared_dim: int = 64
    n_heads: int = 4
    readout: str = "mean"

    def build(self, llm_dims: dict[str, int], point: dict, seed: int) -> nn.Module:
        if self.kind == "act-vit":
            cfg = ActVitConfig(llm_dims, self.pooled_shape, point["patch_size"], self.shared_dim,
                               point["embed_dim"], point["depth"], self.n_heads, dropout=point["dropout"],
                               readout=self.readout)
        elif self.kind == "act-mlp":
            cfg = ActMlpConfig(llm_dims, self.pooled_shape, (point["embed_dim"],) * 2, point["dropout"])
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")
        return build_model(self.kind, cfg, seed)


@dataclass
class GridResult:
    best_point: dict
    model: nn.Module
    runs: list[dict]


def grid_search(grid: GridSpec, model_spec: ModelSpec, corpus: Corpus, optim: OptimSpec,
                val_sets: Sequence[PooledDataset] | None = None,
                llm_dims: dict[str, int] | None = None) -> GridResult:
    """Train every grid point; keep the highest validation AUC (first on ties)."""
    points = grid.points()
    if not points:
        raise ValueError("empty grid")
    llm_dims = llm_dims or corpus.llm_dims
    runs, best = [], None
    for i, point in enumerate(points):
        lp, np_ = model_spec.pooled_shape
        ph, pw = point["patch_size"]
        if model_spec.kind == "act-vit" and (lp % ph or np_ % pw):
            log.info("skipping grid point %d: patch %s does not divide %s", i, point["patch_size"], (lp, np_))
            runs.append({"point": _jsonable(point), "skipped": "patch size does not divide pooled shape"})
            continue
        spec = OptimSpec(lr=point["lr"], weight_decay=point["weight_decay"], epochs=point["epochs"],
                         batch_size=optim.batch_size, seed=optim.seed, grad_clip=optim.grad_clip,
                         class_weighting=optim.class_weighting)
        model = model_spec.build(llm_dims, point, optim.seed)
        res = train(model, corpus, spec, val_sets)
        runs.append({"point": _jsonable(point), "best_epoch": res.best_epoch, "val_auc": res.best_val_auc,
                     "history": res.history})
        if best is None or res.best_val_auc > best[0]:
            best = (res.best_val_auc, point, res.model)
    if best is None:
        raise ValueError("no grid point is compatible with the pooled shape")
    return GridResult(best[1], best[2], runs)


def _jsonable(point: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in point.items()}


@dataclass
class AdaptResult:
    model: nn.Module
    history: list[dict]
    n_train: int
    frozen_checksum: str


def adapt_la(
    pretrained: nn.Module,
    llm_id: str,
    dataset: PooledDataset,
    fraction: float,
    optim: OptimSpec,
    subsample_seed: int | None = None,
) -> AdaptResult:
    """Train a fresh adapter for ``llm_id`` with everything else frozen.

    The adapter is (re)initialized, the backbone, head and positional groups
    plus all other adapters are frozen, and training uses a stratified,
    nested ``fraction`` of the dataset's train split.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if not hasattr(pretrained, "adapters"):
        raise TypeError("LA-only adaptation needs a model with linear adapters")
    model = copy.deepcopy(pretrained)
    if llm_id in model.adapters:
        model.reset_llm(llm_id)
    else:
        model.add_llm(llm_id, dataset.hidden_dim)
    unfreeze(model)
    others = [g for g in model.parameter_groups() if g != f"adapters:{llm_id}"]
    freeze(model, others)
    before = checksum(model, others)

    seed = optim.seed if subsample_seed is None else subsample_seed
    idx = nested_subsample(dataset.splits["train"], dataset.y, fraction, seed)
    sub = PooledDataset(dataset.llm_id, dataset.dataset_id, dataset.x, dataset.y,
                        {**dataset.splits, "train": idx}, dataset.sample_ids)
    result = train(model, Corpus([sub]), optim, [sub])
    after = checksum(result.model, others)
    if before != after:
        raise RuntimeError("frozen parameters changed during adapter training")
    unfreeze(result.model)
    return AdaptResult(result.model, result.history, len(idx), after)


def zero_shot_eval(model: nn.Module, dataset: PooledDataset, split: str = "test") -> float:
    """Test AUC on a pair the model never trained on; no parameters change."""
    if dataset.key in model.trained_on:
        raise ProtocolViolation(f"{dataset.key} was part of the training corpus")
    if dataset.llm_id not in model.config.llm_dims:
        raise UnregisteredLLMError(dataset.llm_id)
    return evaluate(model, dataset, split)


def optim_to_dict(optim: OptimSpec) -> dict:
    return asdict(optim)


__all__ = [
    "WARMUP_FRACTION", "warmup_cosine_lr", "OptimSpec", "reference_mode", "predict_logits", "evaluate",
    "train", "TrainResult", "GridSpec", "ModelSpec", "grid_search", "GridResult", "adapt_la", "AdaptResult",
    "zero_shot_eval", "CorpusSpec",
]
