"""Experiment protocols: in-domain, joint, leave-out transfer and low-data adaptation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .exceptions import ConfigError, ProtocolViolation
from .store import Corpus, CorpusSpec, PooledDataset, nested_subsample
from .training import (GridSpec, ModelSpec, OptimSpec, adapt_la, evaluate, grid_search, train,
                       zero_shot_eval)

log = logging.getLogger(__name__)

PROTOCOLS = ("single_source", "joint_all", "leave_dataset_out", "leave_llm_out", "low_data_adapt")
DEFAULT_FRACTIONS = (0.05, 0.10, 0.20, 0.50, 1.00)

Key = tuple[str, str]


def pair_name(key: Key) -> str:
    return f"{key[0]}/{key[1]}"


@dataclass
class ExperimentPlan:
    """Declarative description of one protocol run.

    ``corpus`` lists the pairs the backbone may train on; when omitted it is
    derived from the available datasets and the protocol's exclusion rule.
    An explicit corpus that contains held-out data is refused.
    """

    protocol: str
    target: Key | None = None
    corpus: CorpusSpec | None = None
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    grid: GridSpec = field(default_factory=GridSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    adapt_optim: OptimSpec = field(default_factory=OptimSpec)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; choose from {', '.join(PROTOCOLS)}")
        if self.target is not None:
            self.target = tuple(self.target)
        if self.protocol in ("leave_dataset_out", "leave_llm_out", "low_data_adapt") and self.target is None:
            raise ConfigError(f"protocol {self.protocol} needs a target (llm_id, dataset_id)")
        self.fractions = tuple(float(f) for f in self.fractions)
        if any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ConfigError("fractions must lie in (0, 1]")

    def held_out(self, key: Key) -> bool:
        """Whether ``key`` must stay out of the pretraining corpus."""
        if self.target is None or self.protocol in ("single_source", "joint_all"):
            return False
        if self.protocol == "leave_llm_out":
            return key[0] == self.target[0]
        return tuple(key) == self.target

    def training_pairs(self, available) -> list[Key]:
        available = [tuple(k) for k in available]
        if self.target is not None and self.target not in available:
            raise ConfigError(f"target {pair_name(self.target)} is not among the available datasets")
        if self.corpus is None:
            pairs = [k for k in available if not self.held_out(k)]
        else:
            pairs = self.corpus.included
            leaked = [k for k in pairs if self.held_out(k)]
            if leaked:
                raise ProtocolViolation(
                    f"{self.protocol}: training corpus contains held-out pair(s) "
                    f"{', '.join(pair_name(k) for k in leaked)}")
            missing = [k for k in pairs if k not in available]
            if missing:
                raise ConfigError(f"corpus references unknown datasets {[pair_name(k) for k in missing]}")
        if not pairs:
            raise ConfigError("training corpus is empty")
        return pairs


def _fit(plan: ExperimentPlan, datasets: Mapping[Key, PooledDataset], pairs: list[Key]):
    corpus = Corpus([datasets[k] for k in pairs])
    return grid_search(plan.grid, plan.model, corpus, plan.optim)


def _grid_record(result) -> dict:
    return {"best_point": {k: list(v) if isinstance(v, tuple) else v for k, v in result.best_point.items()},
            "runs": result.runs}


def run_plan(plan: ExperimentPlan, datasets: Mapping[Key, PooledDataset]) -> dict:
    """Execute ``plan`` and return a JSON-ready metrics dict (AUCs on test splits)."""
    datasets = {tuple(k): v for k, v in datasets.items()}
    pairs = plan.training_pairs(datasets)
    out: dict = {"protocol": plan.protocol, "seed": plan.optim.seed,
                 "training_pairs": [pair_name(k) for k in pairs]}
    if plan.target is not None:
        out["target"] = pair_name(plan.target)

    if plan.protocol == "single_source":
        targets = [plan.target] if plan.target else pairs
        out["test_auc"], out["grid"] = {}, {}
        for key in targets:
            res = _fit(plan, datasets, [key])
            out["test_auc"][pair_name(key)] = evaluate(res.model, datasets[key], "test")
            out["grid"][pair_name(key)] = _grid_record(res)
            if len(targets) == 1:
                out["model"] = res.model

    elif plan.protocol == "joint_all":
        res = _fit(plan, datasets, pairs)
        out["test_auc"] = {pair_name(k): evaluate(res.model, datasets[k], "test") for k in pairs}
        out["grid"] = _grid_record(res)
        out["model"] = res.model

    elif plan.protocol == "leave_dataset_out":
        res = _fit(plan, datasets, pairs)
        target = datasets[plan.target]
        out["grid"] = _grid_record(res)
        if plan.target[0] in res.model.config.llm_dims:
            out["zero_shot_auc"] = zero_shot_eval(res.model, target, "test")
        else:
            log.info("no pretrained adapter for %s; zero-shot skipped", plan.target[0])
            out["zero_shot_auc"] = None
        adapted = adapt_la(res.model, plan.target[0], target, 1.0, plan.adapt_optim)
        out["la_finetune_auc"] = evaluate(adapted.model, target, "test")
        out["model"] = res.model

    elif plan.protocol == "leave_llm_out":
        res = _fit(plan, datasets, pairs)
        out["grid"] = _grid_record(res)
        out["test_auc"] = {}
        for key in sorted(k for k in datasets if k[0] == plan.target[0]):
            adapted = adapt_la(res.model, key[0], datasets[key], 1.0, plan.adapt_optim)
            out["test_auc"][pair_name(key)] = evaluate(adapted.model, datasets[key], "test")
        out["model"] = res.model

    elif plan.protocol == "low_data_adapt":
        res = _fit(plan, datasets, pairs)
        target = datasets[plan.target]
        out["grid"] = _grid_record(res)
        curve = {"fractions": list(plan.fractions), "la_finetune": [], "scratch": [], "n_train": []}
        point = res.best_point
        for frac in plan.fractions:
            adapted = adapt_la(res.model, plan.target[0], target, frac, plan.adapt_optim)
            curve["la_finetune"].append(evaluate(adapted.model, target, "test"))
            curve["n_train"].append(adapted.n_train)
            idx = nested_subsample(target.splits["train"], target.y, frac, plan.adapt_optim.seed)
            sub = PooledDataset(target.llm_id, target.dataset_id, target.x, target.y,
                                {**target.splits, "train": idx}, target.sample_ids)
            scratch = plan.model.build({target.llm_id: target.hidden_dim}, point, plan.optim.seed)
            spec = OptimSpec(lr=point["lr"], weight_decay=point["weight_decay"], epochs=point["epochs"],
                             batch_size=plan.optim.batch_size, seed=plan.optim.seed)
            curve["scratch"].append(evaluate(train(scratch, Corpus([sub]), spec).model, target, "test"))
        out["learning_curve"] = curve
        out["model"] = res.model

    if "test_auc" in out:
        out["mean_test_auc"] = float(np.mean(list(out["test_auc"].values())))
    return out


def metrics_only(result: dict) -> dict:
    """Drop in-memory objects so the result can be serialized."""
    return {k: v for k, v in result.items() if k != "model"}
