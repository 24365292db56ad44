"""scikit-learn style front ends for pooling and the neural detectors."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .activation import PAD_VALUE, ActivationTensor, PoolConfig, PoolMode, pool_array
from .exceptions import InvalidActivationError
from .model import ActMlpConfig, ActVitConfig, build_model
from .store import Corpus, PooledDataset, sanitize_pooled, stratified_split
from .training import OptimSpec, predict_logits, train


def check_pooled(X, hidden_dim: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a finite float32 array of shape (m, L_p, N_p, D)."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise InvalidActivationError("shape", f"expected (m, L_p, N_p, D) input, got shape {X.shape}")
    if X.shape[0] == 0:
        raise InvalidActivationError("shape", "no samples")
    if hidden_dim is not None and X.shape[-1] != hidden_dim:
        raise InvalidActivationError("shape", f"feature dim {X.shape[-1]} != fitted {hidden_dim}")
    if not np.isfinite(X).all():
        raise InvalidActivationError("non-finite", "input contains NaN or Inf")
    return X


def check_binary_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if np.unique(y).size < 2:
        raise ValueError("training labels contain a single class")
    return y.astype(np.int64)


class ActivationPooler(TransformerMixin, BaseEstimator):
    """Stateless transformer: list of activation tensors -> stacked pooled array.

    Cells that cover padding only are set to 0 so the output is finite.
    """

    def __init__(self, n_layers=8, n_tokens=100, mode="two_d", pad_value=PAD_VALUE):
        self.n_layers = n_layers
        self.n_tokens = n_tokens
        self.mode = mode
        self.pad_value = pad_value

    def _config(self) -> PoolConfig:
        return PoolConfig(self.n_layers, self.n_tokens, PoolMode(self.mode), self.pad_value)

    def fit(self, X, y=None):
        self._config()
        return self

    def transform(self, X):
        cfg = self._config()
        arrays = [a.data if isinstance(a, ActivationTensor) else np.asarray(a, dtype=np.float32) for a in X]
        if not arrays:
            raise InvalidActivationError("shape", "no samples")
        pooled = [pool_array(a, cfg) for a in arrays]
        if len({p.shape for p in pooled}) != 1:
            raise InvalidActivationError("shape", "pooled shapes differ; use two_d mode for ragged inputs")
        return sanitize_pooled(np.stack(pooled), cfg.pad_value)


class _NeuralDetector(ClassifierMixin, BaseEstimator):
    # subclasses define _model_config(shape, hidden_dim) and _kind

    def fit(self, X, y):
        X = check_pooled(X)
        y = check_binary_labels(y, len(X))
        tr, va = stratified_split(len(X), self.val_fraction, self.seed, y)
        data = PooledDataset(self.llm_id, "fit", X, y, {"train": tr, "val": va})
        model = build_model(self._kind, self._model_config(X.shape[1:3], X.shape[-1]), self.seed)
        optim = OptimSpec(lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
                          batch_size=self.batch_size, seed=self.seed)
        result = train(model, Corpus([data]), optim)
        self.model_ = result.model
        self.history_ = result.history
        self.hidden_dim_ = X.shape[-1]
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, check_pooled(X, self.hidden_dim_), self.llm_id)

    def predict_proba(self, X):
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)


class ActVitClassifier(_NeuralDetector):
    """ACT-ViT trained on pooled tensors of a single LLM."""

    _kind = "act-vit"

    def __init__(self, patch_size=(1, 1), shared_dim=64, embed_dim=128, depth=3, n_heads=4, dropout=0.3,
                 readout="mean", lr=1e-3, weight_decay=1e-3, epochs=15, batch_size=64, val_fraction=0.2,
                 seed=0, llm_id="llm"):
        self.patch_size = patch_size
        self.shared_dim = shared_dim
        self.embed_dim = embed_dim
        self.depth = depth
        self.n_heads = n_heads
        self.dropout = dropout
        self.readout = readout
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.seed = seed
        self.llm_id = llm_id

    def _model_config(self, shape, hidden_dim):
        return ActVitConfig({self.llm_id: hidden_dim}, tuple(shape), tuple(self.patch_size), self.shared_dim,
                            self.embed_dim, self.depth, self.n_heads, dropout=self.dropout, readout=self.readout)


class ActMlpClassifier(_NeuralDetector):
    """MLP over the flattened pooled tensor."""

    _kind = "act-mlp"

    def __init__(self, hidden=(128, 128), dropout=0.3, lr=1e-3, weight_decay=1e-3, epochs=15, batch_size=64,
                 val_fraction=0.2, seed=0, llm_id="llm"):
        self.hidden = hidden
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.seed = seed
        self.llm_id = llm_id

    def _model_config(self, shape, hidden_dim):
        return ActMlpConfig({self.llm_id: hidden_dim}, tuple(shape), tuple(self.hidden), self.dropout)
