"""On-disk activation datasets, stratified splits and multi-LLM corpora.

A dataset directory holds ``manifest.json`` plus one or more ``ACTSHRD1``
shards. Shards store pooled tensors by default (16-bit when the values fit),
raw activation tensors on request. Each sample contributes an ``act`` record
and, when available, ``token_logits`` / ``token_probas`` records.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from filelock import FileLock

from .activation import ActivationTensor, LlmRegistry, PaddingWarning, PoolConfig, pool_array, validate
from .archive import SHARD_MAGIC, read_archive, write_archive
from .exceptions import InvalidActivationError, ProtocolViolation

MANIFEST = "manifest.json"
_F16_MAX = float(np.finfo(np.float16).max)


def stratified_split(n: int, val_fraction: float, seed: int, labels) -> tuple[list[int], list[int]]:
    """Split ``range(n)`` into (train, val) with per-class val share ``val_fraction``.

    Each class contributes ``round(n_c * val_fraction)`` validation samples,
    drawn by a seeded permutation. Both lists are sorted.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    rng = np.random.default_rng(seed)
    val = []
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ValueError(f"class {c} has no samples")
        k = int(math.floor(idx.size * val_fraction + 0.5))
        val.extend(rng.permutation(idx)[:k].tolist())
    val_set = set(val)
    return [i for i in range(n) if i not in val_set], sorted(val)


def three_way_split(labels, val_fraction: float = 0.2, test_fraction: float = 0.2, seed: int = 42) -> dict:
    """Stratified train/val/test index lists; test is carved out first."""
    labels = np.asarray(labels)
    rest, test = stratified_split(labels.size, test_fraction, seed, labels)
    tr, va = stratified_split(len(rest), val_fraction / (1.0 - test_fraction), seed + 1, labels[rest])
    rest = np.asarray(rest)
    return {"train": rest[tr].tolist(), "val": rest[va].tolist(), "test": test}


def nested_subsample(indices: Sequence[int], labels, fraction: float, seed: int) -> list[int]:
    """Stratified subset of ``indices`` keeping ``fraction`` of each class.

    For a fixed seed the subsets are nested: a smaller fraction always
    selects a prefix of a larger one.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    indices = np.asarray(indices)
    labels = np.asarray(labels)[indices]
    rng = np.random.default_rng(seed)
    out = []
    for c in (0, 1):
        idx = indices[labels == c]
        order = rng.permutation(idx)
        k = max(1, int(math.floor(idx.size * fraction + 0.5))) if idx.size else 0
        out.extend(order[:k].tolist())
    return sorted(out)


@dataclass
class DatasetManifest:
    dataset_id: str
    llm_id: str
    n_samples: int
    splits: dict[str, list[int]]
    label_histogram: dict[str, int]
    pool_config: dict | None = None
    storage: str = "pooled"
    label_method: str = "planted"
    shards: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    format_version: int = 1

    def check(self) -> None:
        seen: set[int] = set()
        for name, idx in self.splits.items():
            overlap = seen.intersection(idx)
            if overlap:
                raise ValueError(f"split {name!r} overlaps earlier splits at {sorted(overlap)[:5]}")
            if any(not 0 <= i < self.n_samples for i in idx):
                raise ValueError(f"split {name!r} has indices outside [0, {self.n_samples})")
            seen.update(idx)
        if self.splits and len(seen) != self.n_samples:
            raise ValueError(f"splits cover {len(seen)} of {self.n_samples} samples")
        if sum(self.label_histogram.values()) != self.n_samples:
            raise ValueError("label histogram does not sum to the sample count")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, payload: dict) -> "DatasetManifest":
        return cls(**payload)


@dataclass
class PooledDataset:
    """In-memory pooled samples of one (llm, dataset) pair, ready for training."""

    llm_id: str
    dataset_id: str
    x: np.ndarray  # (m, L_p, N_p, D) float32, pad sentinel replaced by 0
    y: np.ndarray
    splits: dict[str, list[int]]
    sample_ids: list[str] = field(default_factory=list)
    token_logits: list[np.ndarray] | None = None
    token_probas: list[np.ndarray] | None = None

    @property
    def key(self) -> tuple[str, str]:
        return self.llm_id, self.dataset_id

    @property
    def hidden_dim(self) -> int:
        return self.x.shape[-1]

    def part(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[split]
        return self.x[idx], self.y[idx]


def sanitize_pooled(x: np.ndarray, pad_value: float) -> np.ndarray:
    """Zero the cells that cover padding only so downstream matmuls stay finite."""
    x = np.asarray(x, dtype=np.float32)
    return np.where(x <= np.float32(pad_value) / 2, np.float32(0.0), x)


def pooled_dataset(tensors: Sequence[ActivationTensor], config: PoolConfig, splits: dict, dataset_id: str,
                   token_logits=None, token_probas=None) -> PooledDataset:
    llm_ids = {t.llm_id for t in tensors}
    if len(llm_ids) != 1:
        raise InvalidActivationError("llm", f"dataset mixes llm_ids {sorted(llm_ids)}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", PaddingWarning)
        x = np.stack([pool_array(t.data, config) for t in tensors])
    n_pad = sum(issubclass(w.category, PaddingWarning) for w in caught)
    if n_pad:
        warnings.warn(f"{n_pad} of {len(tensors)} samples have pooled cells covering padding only; "
                      "those cells are set to 0", PaddingWarning, stacklevel=2)
    return PooledDataset(
        llm_id=llm_ids.pop(),
        dataset_id=dataset_id,
        x=sanitize_pooled(x, config.pad_value),
        y=np.array([t.label for t in tensors], dtype=np.int64),
        splits={k: list(v) for k, v in splits.items()},
        sample_ids=[t.sample_id for t in tensors],
        token_logits=token_logits,
        token_probas=token_probas,
    )


def _mark_padding(x: np.ndarray, pad_value: float) -> np.ndarray:
    return np.where(x <= np.float32(pad_value) / 2, np.float32(-np.inf), x)


def _storage_dtype(arr: np.ndarray, half: bool) -> str:
    finite = arr[np.isfinite(arr)]
    if half and np.abs(finite).max(initial=0.0) <= _F16_MAX:
        return "f16"
    return "f32"


def write_shards(
    directory,
    samples: Sequence[ActivationTensor],
    manifest: DatasetManifest,
    *,
    registry: LlmRegistry | None = None,
    token_logits=None,
    token_probas=None,
    half: bool = True,
    shard_size: int = 1000,
    pool_config: PoolConfig | None = None,
) -> DatasetManifest:
    """Validate ``samples`` and persist them with ``manifest``.

    With ``pool_config`` the tensors are pooled before writing and the
    manifest records the config. Everything is validated before any file is
    touched. Records whose values overflow float16 are stored as float32.
    """
    if not samples:
        raise ValueError("no samples to write")
    llm_ids = {s.llm_id for s in samples}
    if len(llm_ids) != 1 or manifest.llm_id not in llm_ids:
        raise InvalidActivationError("llm", f"dataset {manifest.dataset_id!r} mixes llm_ids {sorted(llm_ids)}")
    if registry is not None:
        for s in samples:
            validate(s, registry)
    else:
        for s in samples:
            if not np.isfinite(s.data).all():
                raise InvalidActivationError("non-finite", f"sample {s.sample_id!r} contains NaN or Inf")
    if pool_config is None and len({(s.n_layers, s.hidden_dim) for s in samples}) != 1:
        raise InvalidActivationError("shape", "samples disagree on (layers, hidden dim)")
    if any(s.label is None for s in samples):
        raise ValueError("every sample needs a label")
    manifest.n_samples = len(samples)
    hist = {"0": 0, "1": 0}
    for s in samples:
        hist[str(s.label)] += 1
    manifest.label_histogram = hist
    manifest.check()

    if pool_config:
        # padding-only cells are stored as -inf so they survive 16-bit storage
        arrays = [_mark_padding(pool_array(s.data, pool_config), pool_config.pad_value) for s in samples]
    else:
        arrays = [s.data for s in samples]
    manifest.storage = "pooled" if pool_config else "raw"
    manifest.pool_config = pool_config.to_dict() if pool_config else None

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with FileLock(str(directory / ".lock")):
        shards = []
        for k, lo in enumerate(range(0, len(samples), shard_size)):
            records = []
            for i in range(lo, min(lo + shard_size, len(samples))):
                s, arr = samples[i], arrays[i]
                base = {"sample_id": s.sample_id, "label": s.label, "index": i}
                records.append(({**base, "name": "act", "dtype": _storage_dtype(arr, half)}, arr))
                for name, seqs in (("token_logits", token_logits), ("token_probas", token_probas)):
                    if seqs is not None:
                        records.append(({**base, "name": name, "dtype": "f32"}, np.asarray(seqs[i], np.float32)))
            fname = f"shard-{k:05d}.bin"
            write_archive(directory / fname, SHARD_MAGIC, {"dataset_id": manifest.dataset_id,
                                                           "llm_id": manifest.llm_id}, records)
            shards.append({"file": fname, "sha256": file_sha256(directory / fname)})
        manifest.shards = shards
        (directory / MANIFEST).write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True))
    return manifest


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_manifest(directory) -> DatasetManifest:
    m = DatasetManifest.from_dict(json.loads((Path(directory) / MANIFEST).read_text()))
    m.check()
    return m


def verify_shards(directory) -> bool:
    """True iff the manifest exists and every shard matches its recorded checksum."""
    directory = Path(directory)
    try:
        m = read_manifest(directory)
    except (FileNotFoundError, ValueError, TypeError):
        return False
    return bool(m.shards) and all(
        (directory / s["file"]).exists() and file_sha256(directory / s["file"]) == s["sha256"] for s in m.shards
    )


@dataclass
class StoredDataset:
    manifest: DatasetManifest
    tensors: list[np.ndarray]
    labels: np.ndarray
    sample_ids: list[str]
    token_logits: list[np.ndarray] | None
    token_probas: list[np.ndarray] | None

    def activation_tensors(self) -> list[ActivationTensor]:
        return [ActivationTensor(a, self.manifest.llm_id, sid, int(y))
                for a, sid, y in zip(self.tensors, self.sample_ids, self.labels)]

    def to_pooled(self) -> PooledDataset:
        if self.manifest.storage != "pooled":
            raise ValueError("dataset stores raw tensors; pool them first")
        cfg = PoolConfig.from_dict(self.manifest.pool_config)
        return PooledDataset(
            llm_id=self.manifest.llm_id,
            dataset_id=self.manifest.dataset_id,
            x=sanitize_pooled(np.stack(self.tensors), cfg.pad_value),
            y=self.labels.copy(),
            splits=self.manifest.splits,
            sample_ids=list(self.sample_ids),
            token_logits=self.token_logits,
            token_probas=self.token_probas,
        )


def read_shards(directory) -> StoredDataset:
    """Load a dataset directory; tensors keep their stored dtype (f16 or f32)."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    acts: dict[int, tuple] = {}
    logits: dict[int, np.ndarray] = {}
    probas: dict[int, np.ndarray] = {}
    for shard in manifest.shards:
        _, records = read_archive(directory / shard["file"], SHARD_MAGIC)
        for meta, arr in records:
            i = meta["index"]
            if meta["name"] == "act":
                acts[i] = (arr, meta["sample_id"], meta["label"])
            elif meta["name"] == "token_logits":
                logits[i] = arr
            elif meta["name"] == "token_probas":
                probas[i] = arr
    order = sorted(acts)
    if order != list(range(manifest.n_samples)):
        raise ValueError(f"{directory}: shards hold {len(order)} of {manifest.n_samples} samples")
    return StoredDataset(
        manifest=manifest,
        tensors=[acts[i][0] for i in order],
        labels=np.array([acts[i][2] for i in order], dtype=np.int64),
        sample_ids=[acts[i][1] for i in order],
        token_logits=[logits[i] for i in order] if logits else None,
        token_probas=[probas[i] for i in order] if probas else None,
    )


@dataclass(frozen=True)
class CorpusEntry:
    llm_id: str
    dataset_id: str
    include: bool = True
    weight: float = 1.0


@dataclass
class CorpusSpec:
    entries: list[CorpusEntry]

    def __post_init__(self):
        self.entries = [e if isinstance(e, CorpusEntry) else CorpusEntry(**e) for e in self.entries]
        if not any(e.include for e in self.entries):
            raise ValueError("corpus includes no (llm, dataset) pair")
        if any(e.weight <= 0 for e in self.entries):
            raise ValueError("corpus weights must be positive")

    @property
    def included(self) -> list[tuple[str, str]]:
        return [(e.llm_id, e.dataset_id) for e in self.entries if e.include]

    @property
    def excluded(self) -> list[tuple[str, str]]:
        return [(e.llm_id, e.dataset_id) for e in self.entries if not e.include]

    def weight(self, key) -> float:
        return next(e.weight for e in self.entries if (e.llm_id, e.dataset_id) == tuple(key))

    @classmethod
    def from_pairs(cls, pairs, exclude=()) -> "CorpusSpec":
        exclude = {tuple(p) for p in exclude}
        return cls([CorpusEntry(l, d, include=(l, d) not in exclude) for l, d in pairs])


@dataclass
class Batch:
    llm_id: str
    dataset_id: str
    indices: np.ndarray
    x: np.ndarray
    y: np.ndarray


class Corpus:
    """Pooled datasets addressed by (llm_id, dataset_id), filtered by a spec."""

    def __init__(self, datasets: Sequence[PooledDataset], spec: CorpusSpec | None = None):
        self.datasets = {d.key: d for d in datasets}
        self.spec = spec or CorpusSpec.from_pairs(self.datasets)
        missing = [k for k in self.spec.included if k not in self.datasets]
        if missing:
            raise KeyError(f"corpus references missing datasets {missing}")

    def __getitem__(self, key) -> PooledDataset:
        key = tuple(key)
        if key in self.spec.excluded:
            raise ProtocolViolation(f"{key} is excluded from this corpus")
        if key not in self.spec.included:
            raise KeyError(key)
        return self.datasets[key]

    @property
    def keys(self) -> list[tuple[str, str]]:
        return self.spec.included

    @property
    def llm_dims(self) -> dict[str, int]:
        return {k[0]: self.datasets[k].hidden_dim for k in self.keys}

    def batches(self, batch_size: int, seed: int, epoch: int = 0, split: str = "train") -> Iterator[Batch]:
        return assemble_corpus(self, batch_size, seed, epoch, split)


def assemble_corpus(corpus: Corpus, batch_size: int, seed: int, epoch: int = 0,
                    split: str = "train") -> Iterator[Batch]:
    """One epoch of single-LLM batches over every included training sample.

    Each pair's split is shuffled by ``(seed, epoch)`` and cut into batches;
    batches from all pairs are then interleaved in a random order (exponential
    race with rate = pair weight), so larger pairs appear proportionally.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    slots = []
    for key in corpus.keys:
        ds = corpus[key]
        idx = rng.permutation(np.asarray(ds.splits[split], dtype=np.int64))
        w = corpus.spec.weight(key)
        for lo in range(0, idx.size, batch_size):
            slots.append((rng.exponential() / w, key, idx[lo:lo + batch_size]))
    slots.sort(key=lambda s: s[0])
    for _, key, idx in slots:
        ds = corpus.datasets[key]
        yield Batch(key[0], key[1], idx, ds.x[idx], ds.y[idx])
