"""Tiny deterministic transformers that stand in for LLMs.

Every block follows the residual recurrence

    A[l] = A[l-1] + ReLU(Attn(A[l-1]) @ W1 + b1) @ W2 + b2

where ``Attn`` is causal multi-head attention preceded by layer norm. The
activation tensor of a response is the stack of ``A[1..L]`` over the response
positions. Inputs are "soft tokens": one-hot rows plus Gaussian noise in
vocabulary space, so samples vary continuously while staying in the
coordinates that feature permutations leave untouched.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .activation import ActivationTensor, LlmDescriptor

_LN_EPS = 1e-5


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + _LN_EPS) * gain + bias


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class ToyLayer:
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_1: np.ndarray
    b_1: np.ndarray
    w_2: np.ndarray
    b_2: np.ndarray


@dataclass
class ToyTransformer:
    llm_id: str
    n_layers: int
    hidden_dim: int
    n_heads: int
    vocab_size: int
    max_len: int
    embed: np.ndarray
    pos_embed: np.ndarray
    layers: list[ToyLayer]
    final_gain: np.ndarray
    final_bias: np.ndarray
    unembed: np.ndarray
    seed: int = 0

    @classmethod
    def random(
        cls,
        llm_id: str,
        n_layers: int = 6,
        hidden_dim: int = 32,
        n_heads: int = 4,
        vocab_size: int = 64,
        max_len: int = 512,
        ffn_scale: float = 8.0,
        seed: int = 0,
    ) -> "ToyTransformer":
        if hidden_dim % n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        rng = np.random.default_rng(seed)
        d = hidden_dim

        def mat(rows, cols, scale):
            return rng.normal(0.0, scale / np.sqrt(rows), size=(rows, cols))

        layers = []
        for _ in range(n_layers):
            layers.append(
                ToyLayer(
                    ln_gain=1.0 + 0.1 * rng.normal(size=d),
                    ln_bias=0.1 * rng.normal(size=d),
                    w_q=mat(d, d, 1.0),
                    w_k=mat(d, d, 1.0),
                    w_v=mat(d, d, 1.0),
                    w_o=mat(d, d, 1.0),
                    w_1=mat(d, d, np.sqrt(2.0)),
                    b_1=0.1 * rng.normal(size=d),
                    w_2=mat(d, d, ffn_scale),
                    b_2=0.1 * rng.normal(size=d),
                )
            )
        return cls(
            llm_id=llm_id,
            n_layers=n_layers,
            hidden_dim=d,
            n_heads=n_heads,
            vocab_size=vocab_size,
            max_len=max_len,
            embed=rng.normal(size=(vocab_size, d)),
            pos_embed=0.5 * rng.normal(size=(max_len, d)),
            layers=layers,
            final_gain=1.0 + 0.1 * rng.normal(size=d),
            final_bias=0.1 * rng.normal(size=d),
            unembed=mat(d, vocab_size, 1.0),
            seed=seed,
        )

    @property
    def descriptor(self) -> LlmDescriptor:
        return LlmDescriptor(self.llm_id, self.n_layers, self.hidden_dim)

    def _attention(self, layer: ToyLayer, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        h = _layer_norm(x, layer.ln_gain, layer.ln_bias)
        hd = self.hidden_dim // self.n_heads
        q = (h @ layer.w_q).reshape(n, self.n_heads, hd).transpose(1, 0, 2)
        k = (h @ layer.w_k).reshape(n, self.n_heads, hd).transpose(1, 0, 2)
        v = (h @ layer.w_v).reshape(n, self.n_heads, hd).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(hd)
        scores = np.where(np.tril(np.ones((n, n), dtype=bool)), scores, -np.inf)
        out = (_softmax(scores) @ v).transpose(1, 0, 2).reshape(n, self.hidden_dim)
        return out @ layer.w_o

    def run(self, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Run on soft-token inputs of shape ``(n, vocab)``.

        Returns hidden states ``(n_layers, n, hidden_dim)`` and output logits
        ``(n, vocab)``, both float64.
        """
        n = inputs.shape[0]
        if n == 0:
            raise ValueError("token sequence must be non-empty")
        if n > self.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len={self.max_len}")
        x = inputs @ self.embed + self.pos_embed[:n]
        states = np.empty((self.n_layers, n, self.hidden_dim))
        for i, layer in enumerate(self.layers):
            a = self._attention(layer, x)
            x = x + np.maximum(a @ layer.w_1 + layer.b_1, 0.0) @ layer.w_2 + layer.b_2
            states[i] = x
        logits = _layer_norm(x, self.final_gain, self.final_bias) @ self.unembed
        return states, logits

    def one_hot(self, tokens: Sequence[int]) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        out = np.zeros((tokens.size, self.vocab_size))
        out[np.arange(tokens.size), tokens] = 1.0
        return out


def forward_collect(
    model: ToyTransformer,
    tokens: Sequence[int],
    *,
    noise: np.ndarray | None = None,
    sample_id: str = "",
) -> ActivationTensor:
    """Activation tensor of ``model`` over every position of ``tokens``."""
    if len(tokens) == 0:
        raise ValueError("token sequence must be non-empty")
    inputs = model.one_hot(tokens)
    if noise is not None:
        inputs = inputs + noise
    states, _ = model.run(inputs)
    return ActivationTensor(states.astype(np.float32), model.llm_id, sample_id)


def permute_clone(model: ToyTransformer, sigma: Sequence[int], llm_id: str | None = None) -> ToyTransformer:
    """Functionally identical clone whose hidden features are permuted by ``sigma``.

    The clone's activations satisfy ``A_clone[l, n, d] == A[l, n, sigma[d]]``.
    Every map writing into the residual stream gets its output columns
    permuted, every map reading from it gets its input rows permuted, and the
    layer-norm affine parameters follow the features.
    """
    sigma = np.asarray(sigma, dtype=np.int64)
    if sigma.shape != (model.hidden_dim,) or not np.array_equal(np.sort(sigma), np.arange(model.hidden_dim)):
        raise ValueError(f"sigma must be a permutation of range({model.hidden_dim})")
    clone = copy.deepcopy(model)
    clone.llm_id = llm_id or f"{model.llm_id}-perm"
    clone.embed = model.embed[:, sigma]
    clone.pos_embed = model.pos_embed[:, sigma]
    for src, dst in zip(model.layers, clone.layers):
        dst.ln_gain = src.ln_gain[sigma]
        dst.ln_bias = src.ln_bias[sigma]
        dst.w_q = src.w_q[sigma, :]
        dst.w_k = src.w_k[sigma, :]
        dst.w_v = src.w_v[sigma, :]
        dst.w_2 = src.w_2[:, sigma]
        dst.b_2 = src.b_2[sigma]
    clone.final_gain = model.final_gain[sigma]
    clone.final_bias = model.final_bias[sigma]
    clone.unembed = model.unembed[sigma, :]
    return clone


def resolve_offset(offset: int, n_tokens: int) -> int:
    idx = offset if offset >= 0 else n_tokens + offset
    if not 0 <= idx < n_tokens:
        raise IndexError(f"token offset {offset} out of range for {n_tokens} tokens")
    return idx


@dataclass
class PlantedTask:
    """Labeling rule tied to one (layer, token-offset) position.

    ``rule="linear"`` labels by the sign of the centered projection on
    ``direction``; ``rule="xor"`` takes the XOR of the signs along
    ``direction`` and an orthogonal ``second_direction``. Labels are then
    flipped with probability ``flip_p``. ``noise_scale`` is the std of the
    soft-token input noise.
    """

    name: str = "linear"
    signal_layer: int = 2
    signal_token_offset: int = -1
    rule: str = "linear"
    noise_scale: float = 0.5
    flip_p: float = 0.0
    min_tokens: int = 8
    max_tokens: int = 64
    prompt_len: int = 4
    direction_seed: int = 0
    direction: np.ndarray | None = None
    second_direction: np.ndarray | None = None
    center: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.flip_p <= 0.5:
            raise ValueError("flip_p must lie in [0, 0.5]")
        if self.rule not in ("linear", "xor"):
            raise ValueError(f"unknown rule {self.rule!r}")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")
        for name in ("direction", "second_direction"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if not np.isclose(np.linalg.norm(v), 1.0):
                    raise ValueError(f"{name} must have unit norm")
                setattr(self, name, v)

    def permuted(self, sigma: Sequence[int]) -> "PlantedTask":
        """The same task expressed in the coordinates of ``permute_clone(model, sigma)``."""
        sigma = np.asarray(sigma)
        out = copy.deepcopy(self)
        for name in ("direction", "second_direction"):
            v = getattr(self, name)
            if v is not None:
                setattr(out, name, np.asarray(v)[..., sigma])
        return out

    def projections(self, vectors: np.ndarray) -> np.ndarray:
        dirs = [self.direction] if self.rule == "linear" else [self.direction, self.second_direction]
        return np.stack([vectors @ u for u in dirs], axis=-1) - self.center

    def clean_labels(self, vectors: np.ndarray) -> np.ndarray:
        signs = self.projections(vectors) > 0
        if self.rule == "linear":
            return signs[..., 0].astype(np.int64)
        return (signs[..., 0] ^ signs[..., 1]).astype(np.int64)


@dataclass
class SyntheticDataset:
    """Labeled activation tensors of one (toy LLM, task) pair."""

    llm_id: str
    dataset_id: str
    tensors: list[ActivationTensor]
    token_logits: list[np.ndarray]
    token_probas: list[np.ndarray]
    task: PlantedTask

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.tensors], dtype=np.int64)

    def __len__(self):
        return len(self.tensors)


def _random_unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _sample_inputs(model: ToyTransformer, task: PlantedTask, seed: int, index: int):
    rng = np.random.default_rng([seed, index])
    n = int(rng.integers(task.min_tokens, task.max_tokens + 1))
    tokens = rng.integers(0, model.vocab_size, size=task.prompt_len + n)
    noise = task.noise_scale * rng.normal(size=(tokens.size, model.vocab_size))
    flip = rng.random() < task.flip_p
    return tokens, noise, n, flip


def _simulate(model: ToyTransformer, task: PlantedTask, seed: int, index: int):
    tokens, noise, n, flip = _sample_inputs(model, task, seed, index)
    states, logits = model.run(model.one_hot(tokens) + noise)
    p = task.prompt_len
    # logits at position t score the token at t + 1; without a prompt the
    # first response token is scored by its own position
    rows = logits[np.arange(p - 1, p + n - 1)] if p > 0 else logits[:n]
    chosen = rows[np.arange(n), tokens[p:]]
    top = rows.max(axis=-1)
    probas = np.exp(chosen - top) / np.exp(rows - top[:, None]).sum(axis=-1)
    acts = states[:, p:, :]
    vec = acts[task.signal_layer, resolve_offset(task.signal_token_offset, n)]
    return acts, chosen, probas, vec, flip


def fit_task(model: ToyTransformer, task: PlantedTask, n_pilot: int = 256) -> PlantedTask:
    """Fill in directions and the projection center of ``task`` for ``model``.

    Directions come from ``task.direction_seed``; the center is the median
    projection over a pilot batch so clean labels are balanced.
    """
    if not 0 <= task.signal_layer < model.n_layers:
        raise ValueError(f"signal_layer {task.signal_layer} outside model with {model.n_layers} layers")
    task = copy.deepcopy(task)
    rng = np.random.default_rng([task.direction_seed, 7919])
    if task.direction is None:
        task.direction = _random_unit(rng, model.hidden_dim)
    if task.rule == "xor" and task.second_direction is None:
        v = rng.normal(size=model.hidden_dim)
        v -= (v @ task.direction) * task.direction
        task.second_direction = v / np.linalg.norm(v)
    pilot_seed = int(np.random.default_rng([task.direction_seed, 104729]).integers(2**31))
    vecs = np.stack([_simulate(model, task, pilot_seed, i)[3] for i in range(n_pilot)])
    dirs = [task.direction] if task.rule == "linear" else [task.direction, task.second_direction]
    task.center = np.array([np.median(vecs @ u) for u in dirs])
    return task


def generate_dataset(
    model: ToyTransformer,
    task: PlantedTask,
    m: int,
    seed: int,
    dataset_id: str | None = None,
    max_redraws: int = 50,
) -> SyntheticDataset:
    """Sample ``m`` labeled activation tensors from ``model`` under ``task``.

    Sample ``i`` draws all its randomness from ``(seed, i)``. When the task has
    no fitted center it is fitted first. If the clean label balance falls
    outside 45-55% (only checked for ``flip_p <= 0.1``) the direction is
    redrawn.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if task.center is None:
        task = fit_task(model, task)
    sims = [_simulate(model, task, seed, i) for i in range(m)]
    vecs = np.stack([s[3] for s in sims])
    flips = np.array([s[4] for s in sims])
    clean = task.clean_labels(vecs)
    redraws = 0
    while task.flip_p <= 0.1 and m >= 20 and not 0.45 <= clean.mean() <= 0.55:
        if redraws >= max_redraws:
            raise RuntimeError("could not find a balanced planted direction")
        redraws += 1
        task = fit_task(model, PlantedTask(**{**task.__dict__, "direction": None, "second_direction": None,
                                              "center": None, "direction_seed": task.direction_seed + 1000}))
        clean = task.clean_labels(vecs)
    labels = clean ^ flips.astype(np.int64)
    dataset_id = dataset_id or task.name
    tensors = [
        ActivationTensor(s[0].astype(np.float32), model.llm_id, f"{dataset_id}-{i:06d}", int(y))
        for i, (s, y) in enumerate(zip(sims, labels))
    ]
    return SyntheticDataset(
        llm_id=model.llm_id,
        dataset_id=dataset_id,
        tensors=tensors,
        token_logits=[s[1].astype(np.float32) for s in sims],
        token_probas=[s[2].astype(np.float32) for s in sims],
        task=task,
    )


DEFAULT_TOY_LLMS = (
    ("toy-a", 4, 16),
    ("toy-b", 6, 32),
    ("toy-c", 8, 48),
)


def default_toy_llms(seed: int = 0) -> list[ToyTransformer]:
    """Three toy models with mismatched (layers, hidden dim)."""
    return [
        ToyTransformer.random(name, n_layers=nl, hidden_dim=d, seed=seed + i)
        for i, (name, nl, d) in enumerate(DEFAULT_TOY_LLMS)
    ]
